//! Local objectives with exact conjugate maximizers.
//!
//! Every agent `i` holds a strongly convex `f_i` together with the oracle
//! `z ↦ argmax_x ⟨z, x⟩ − f_i(x)`. Two families ship:
//!
//! * [`QuadraticLocal`]: `½·scale·‖b − Hx‖² + ½·ridge·‖x‖²`, whose conjugate
//!   maximizer solves `(scale·HᵀH + ridge·I) x = z + scale·Hᵀb` with a cached Cholesky
//!   factor.
//! * [`KlLocal`]: `KL(x ‖ q)` restricted to the unit simplex, whose conjugate
//!   maximizer is the tilted distribution `x ∝ q ⊙ exp(z)`.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::{Error, Result};

/// Lower bound kept on simplex coordinates by projections, so logarithms stay finite.
pub const SIMPLEX_FLOOR: f64 = 1e-15;

pub trait DualFriendly {
    fn dimension(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> f64;
    /// Gradient on the interior of the domain.
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn conjugate_argmax(&self, z: &[f64], out: &mut [f64]);
    fn strong_convexity(&self) -> f64;

    /// `⟨z, x*(z)⟩ − f(x*(z))`, the convex conjugate at `z`.
    fn conjugate_value(&self, z: &[f64]) -> f64 {
        let mut x = vec![0.0; self.dimension()];
        self.conjugate_argmax(z, &mut x);
        dot(z, &x) - self.evaluate(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Quadratic,
    Kl,
}

#[derive(Debug, Clone)]
pub struct QuadraticLocal {
    h: DMatrix<f64>,
    b: DVector<f64>,
    scale: f64,
    ridge: f64,
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    factor: Cholesky<f64, Dyn>,
    mu: f64,
    curvature_max: f64,
}

impl QuadraticLocal {
    pub fn new(h: DMatrix<f64>, b: DVector<f64>, scale: f64, ridge: f64) -> Result<Self> {
        if h.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: h.nrows(),
                got: b.len(),
            });
        }
        if !(scale > 0.0) || !(ridge >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive and ridge non-negative (scale={scale}, ridge={ridge})"
            )));
        }
        let p = h.ncols();
        let hessian = h.transpose() * &h * scale + DMatrix::identity(p, p) * ridge;
        let linear = h.transpose() * &b * scale;
        let eig = SymmetricEigen::new(hessian.clone());
        let mu = eig.eigenvalues.min();
        let curvature_max = eig.eigenvalues.max();
        if !(mu > 1e-14 * curvature_max.max(f64::MIN_POSITIVE)) {
            return Err(Error::SingularSystem(format!(
                "smallest curvature {mu:e} (l = {}, p = {p}, ridge = {ridge}); \
                 use l >= p or a positive ridge",
                h.nrows()
            )));
        }
        let factor = Cholesky::new(hessian.clone())
            .ok_or_else(|| Error::SingularSystem("Cholesky factorization failed".into()))?;
        Ok(QuadraticLocal {
            h,
            b,
            scale,
            ridge,
            hessian,
            linear,
            factor,
            mu,
            curvature_max,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// `scale·HᵀH + ridge·I`
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    /// `scale·Hᵀb`
    pub fn linear_term(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn curvature_max(&self) -> f64 {
        self.curvature_max
    }

    /// Unconstrained local minimizer `x*(0)`.
    pub fn local_minimizer(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dimension()];
        self.conjugate_argmax(&vec![0.0; self.dimension()], &mut x);
        x
    }
}

impl DualFriendly for QuadraticLocal {
    fn dimension(&self) -> usize {
        self.h.ncols()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let r = &self.b - &self.h * &xv;
        0.5 * self.scale * r.norm_squared() + 0.5 * self.ridge * xv.norm_squared()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let g = &self.hessian * DVector::from_column_slice(x) - &self.linear;
        out.copy_from_slice(g.as_slice());
    }

    fn conjugate_argmax(&self, z: &[f64], out: &mut [f64]) {
        let mut rhs = DVector::from_iterator(z.len(), z.iter().zip(self.linear.iter()).map(|(a, c)| a + c));
        self.factor.solve_mut(&mut rhs);
        out.copy_from_slice(rhs.as_slice());
    }

    fn strong_convexity(&self) -> f64 {
        self.mu
    }
}

#[derive(Debug, Clone)]
pub struct KlLocal {
    q: Vec<f64>,
    log_q: Vec<f64>,
}

impl KlLocal {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidParameter("empty reference distribution".into()));
        }
        if q.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "reference distribution entries must be strictly positive".into(),
            ));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "reference distribution sums to {total}, not 1"
            )));
        }
        let log_q = q.iter().map(|v| v.ln()).collect();
        Ok(KlLocal { q, log_q })
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn log_q(&self) -> &[f64] {
        &self.log_q
    }

    /// `max_j |log(x_j / q_j)|`, the empirical Lipschitz proxy at `x`.
    pub fn log_ratio_max(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.log_q)
            .map(|(xj, lq)| (xj.ln() - lq).abs())
            .fold(0.0, f64::max)
    }
}

impl DualFriendly for KlLocal {
    fn dimension(&self) -> usize {
        self.q.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.log_q)
            .map(|(&xj, &lq)| if xj > 0.0 { xj * (xj.ln() - lq) } else { 0.0 })
            .sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for ((o, &xj), &lq) in out.iter_mut().zip(x).zip(&self.log_q) {
            *o = xj.ln() - lq + 1.0;
        }
    }

    fn conjugate_argmax(&self, z: &[f64], out: &mut [f64]) {
        // log-sum-exp stabilised tilt of q
        let mut m = f64::NEG_INFINITY;
        for (o, (&zj, &lq)) in out.iter_mut().zip(z.iter().zip(&self.log_q)) {
            *o = lq + zj;
            m = m.max(*o);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    /// Heuristic: negative entropy is 1-strongly convex in ℓ₂ on the simplex,
    /// but the bound is not uniform in any useful sense for step sizes.
    fn strong_convexity(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone)]
pub enum LocalObjective {
    Quadratic(QuadraticLocal),
    Kl(KlLocal),
}

impl LocalObjective {
    pub fn family(&self) -> Family {
        match self {
            LocalObjective::Quadratic(_) => Family::Quadratic,
            LocalObjective::Kl(_) => Family::Kl,
        }
    }

    /// Projects `x` onto the domain (identity for quadratics, floored simplex for KL).
    pub fn project(&self, x: &mut [f64]) {
        if let LocalObjective::Kl(_) = self {
            project_simplex(x, SIMPLEX_FLOOR);
        }
    }

    /// Gradient restricted to the tangent space of the domain.
    pub fn tangent_gradient(&self, x: &[f64], out: &mut [f64]) {
        self.gradient(x, out);
        if let LocalObjective::Kl(_) = self {
            center(out);
        }
    }

    /// Stationarity residual of the conjugate oracle at `z`:
    /// `‖∇f(x*(z)) − z‖`, measured modulo the simplex normal for KL.
    pub fn kkt_residual(&self, z: &[f64]) -> f64 {
        let p = self.dimension();
        let mut x = vec![0.0; p];
        self.conjugate_argmax(z, &mut x);
        let mut g = vec![0.0; p];
        self.gradient(&x, &mut g);
        for (gj, zj) in g.iter_mut().zip(z) {
            *gj -= zj;
        }
        if let LocalObjective::Kl(_) = self {
            center(&mut g);
        }
        norm(&g)
    }

    /// `min_x f(x)` over the domain.
    pub fn minimum_value(&self) -> f64 {
        match self {
            LocalObjective::Quadratic(q) => q.evaluate(&q.local_minimizer()),
            LocalObjective::Kl(_) => 0.0,
        }
    }

    /// Empirical Lipschitz proxy over a set of observed points: `max ‖∇f(x)‖` for
    /// quadratics, `max_j |log(x_j/q_j)|` for KL.
    pub fn lipschitz_hint<'a, I>(&self, points: I) -> f64
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut g = vec![0.0; self.dimension()];
        points
            .into_iter()
            .map(|x| match self {
                LocalObjective::Quadratic(q) => {
                    q.gradient(x, &mut g);
                    norm(&g)
                }
                LocalObjective::Kl(k) => k.log_ratio_max(x),
            })
            .fold(0.0, f64::max)
    }
}

impl DualFriendly for LocalObjective {
    fn dimension(&self) -> usize {
        match self {
            LocalObjective::Quadratic(q) => q.dimension(),
            LocalObjective::Kl(k) => k.dimension(),
        }
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            LocalObjective::Quadratic(q) => q.evaluate(x),
            LocalObjective::Kl(k) => k.evaluate(x),
        }
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            LocalObjective::Quadratic(q) => q.gradient(x, out),
            LocalObjective::Kl(k) => k.gradient(x, out),
        }
    }

    fn conjugate_argmax(&self, z: &[f64], out: &mut [f64]) {
        match self {
            LocalObjective::Quadratic(q) => q.conjugate_argmax(z, out),
            LocalObjective::Kl(k) => k.conjugate_argmax(z, out),
        }
    }

    fn strong_convexity(&self) -> f64 {
        match self {
            LocalObjective::Quadratic(q) => q.strong_convexity(),
            LocalObjective::Kl(k) => k.strong_convexity(),
        }
    }
}

/// The per-agent objectives of one network, all of a common dimension.
#[derive(Debug, Clone)]
pub struct ObjectiveSet {
    locals: Vec<LocalObjective>,
    dim: usize,
}

impl ObjectiveSet {
    pub fn new(locals: Vec<LocalObjective>) -> Result<Self> {
        let dim = locals
            .first()
            .map(DualFriendly::dimension)
            .ok_or_else(|| Error::InvalidParameter("no local objectives".into()))?;
        for (i, obj) in locals.iter().enumerate() {
            if obj.dimension() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: obj.dimension(),
                }
                .at_agent(i));
            }
        }
        Ok(ObjectiveSet { locals, dim })
    }

    pub fn len(&self) -> usize {
        self.locals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locals.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize) -> &LocalObjective {
        &self.locals[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LocalObjective> {
        self.locals.iter()
    }

    /// The common family, or `None` for a mixed set.
    pub fn family(&self) -> Option<Family> {
        let first = self.locals[0].family();
        self.locals.iter().all(|o| o.family() == first).then_some(first)
    }

    /// Smallest strong-convexity modulus across agents.
    pub fn strong_convexity(&self) -> f64 {
        self.locals
            .iter()
            .map(DualFriendly::strong_convexity)
            .fold(f64::INFINITY, f64::min)
    }

    fn check_stacked(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.len() * self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.len() * self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `F(x) = Σ_i f_i(x_i)`
    pub fn aggregate_value(&self, x: &[f64]) -> Result<f64> {
        self.check_stacked(x)?;
        let p = self.dim;
        Ok(self
            .locals
            .iter()
            .enumerate()
            .map(|(i, f)| f.evaluate(&x[i * p..(i + 1) * p]))
            .sum())
    }

    /// Stacked gradient of `F`.
    pub fn aggregate_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_stacked(x)?;
        let p = self.dim;
        let mut out = vec![0.0; x.len()];
        for (i, f) in self.locals.iter().enumerate() {
            f.gradient(&x[i * p..(i + 1) * p], &mut out[i * p..(i + 1) * p]);
        }
        Ok(out)
    }

    /// Stacked conjugate maximizer: block `i` is `f_i`'s oracle at `z_i`.
    pub fn stacked_conjugate(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_stacked(z)?;
        let p = self.dim;
        let mut out = vec![0.0; z.len()];
        for (i, f) in self.locals.iter().enumerate() {
            let dst = &mut out[i * p..(i + 1) * p];
            f.conjugate_argmax(&z[i * p..(i + 1) * p], dst);
            if dst.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { iteration: 0 }.at_agent(i));
            }
        }
        Ok(out)
    }

    /// `F*(z) = Σ_i f_i*(z_i)`, the dual objective in transformed coordinates.
    pub fn conjugate_value(&self, z: &[f64]) -> Result<f64> {
        self.check_stacked(z)?;
        let p = self.dim;
        Ok(self
            .locals
            .iter()
            .enumerate()
            .map(|(i, f)| f.conjugate_value(&z[i * p..(i + 1) * p]))
            .sum())
    }

    /// `min_x F(x)` without the consensus constraint.
    pub fn unconstrained_minimum(&self) -> f64 {
        self.locals.iter().map(LocalObjective::minimum_value).sum()
    }
}

/// Synthetic distributed least squares: `H_i` and `b_i` entries i.i.d. uniform on `[0, 1]`,
/// scale `1/(n·l)`.
pub fn regression_instance(n: usize, p: usize, l: usize, ridge: f64, seed: u64) -> Result<ObjectiveSet> {
    if n == 0 || p == 0 || l == 0 {
        return Err(Error::InvalidParameter("n, p and l must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scale = 1.0 / (n * l) as f64;
    let locals = (0..n)
        .map(|i| {
            let h = DMatrix::from_fn(l, p, |_, _| rng.gen::<f64>());
            let b = DVector::from_fn(l, |_, _| rng.gen::<f64>());
            QuadraticLocal::new(h, b, scale, ridge)
                .map(LocalObjective::Quadratic)
                .map_err(|e| e.at_agent(i))
        })
        .collect::<Result<Vec<_>>>()?;
    ObjectiveSet::new(locals)
}

/// Synthetic KL barycenter: each `q_i` has i.i.d. uniform `(0, 1]` weights, normalized.
pub fn kl_instance(n: usize, p: usize, seed: u64) -> Result<ObjectiveSet> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidParameter("n and p must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let locals = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..p).map(|_| 1.0 - rng.gen::<f64>()).collect();
            KlLocal::new(normalize(raw)).map(LocalObjective::Kl)
        })
        .collect::<Result<Vec<_>>>()?;
    ObjectiveSet::new(locals)
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let total: f64 = v.iter().sum();
    for x in &mut v {
        *x /= total;
    }
    v
}

/// Reads a headerless numeric CSV into a dense matrix.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| Error::Csv {
            path: display.clone(),
            source,
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| Error::Csv {
            path: display.clone(),
            source,
        })?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidParameter(format!("{display}: cannot parse {field:?} as a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    got: row.len(),
                });
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Euclidean projection onto `{x : x_j ≥ floor, Σ x_j = 1}`.
pub fn project_simplex(x: &mut [f64], floor: f64) {
    let p = x.len();
    let mass = 1.0 - floor * p as f64;
    let mut sorted: Vec<f64> = x.iter().map(|v| v - floor).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - mass) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    for v in x.iter_mut() {
        *v = (*v - floor - theta).max(0.0) + floor;
    }
}

pub(crate) fn center(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_quadratic(b: &[f64]) -> QuadraticLocal {
        let p = b.len();
        QuadraticLocal::new(DMatrix::identity(p, p), DVector::from_column_slice(b), 1.0, 0.0).unwrap()
    }

    /// Plain gradient descent on `f(x) − ⟨z, x⟩`, independent of the Cholesky path.
    fn inner_minimize(q: &QuadraticLocal, z: &[f64]) -> Vec<f64> {
        let p = q.dimension();
        let step = 1.0 / q.curvature_max();
        let mut x = vec![0.0; p];
        let mut g = vec![0.0; p];
        for _ in 0..200_000 {
            q.gradient(&x, &mut g);
            let mut size = 0.0;
            for ((xj, gj), zj) in x.iter_mut().zip(&g).zip(z) {
                let d = gj - zj;
                *xj -= step * d;
                size += d * d;
            }
            if size.sqrt() < 1e-14 {
                break;
            }
        }
        x
    }

    #[test]
    fn quadratic_identity_cases() {
        let q = identity_quadratic(&[0.0, 0.0, 0.0]);
        let mut x = [0.0; 3];
        q.conjugate_argmax(&[0.4, -2.0, 7.5], &mut x);
        assert!(x.iter().zip([0.4, -2.0, 7.5]).all(|(a, b)| (a - b).abs() < 1e-14));

        let q = identity_quadratic(&[1.0, 2.0]);
        let mut x = [0.0; 2];
        q.conjugate_argmax(&[0.0, 0.0], &mut x);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn quadratic_matches_inner_minimization_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..5 {
            let h = DMatrix::from_fn(3, 2, |_, _| rng.gen::<f64>());
            let b = DVector::from_fn(3, |_, _| rng.gen::<f64>());
            let q = QuadraticLocal::new(h, b, 1.0 / 6.0, 0.0).unwrap();
            let z = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let mut x = [0.0; 2];
            q.conjugate_argmax(&z, &mut x);
            let oracle = inner_minimize(&q, &z);
            for (a, b) in x.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "{x:?} vs {oracle:?}");
            }
            assert!(LocalObjective::Quadratic(q).kkt_residual(&z) < 1e-10);
        }
    }

    #[test]
    fn underdetermined_without_ridge_is_singular() {
        let h = DMatrix::from_element(2, 3, 0.5);
        let b = DVector::from_element(2, 1.0);
        assert!(matches!(
            QuadraticLocal::new(h.clone(), b.clone(), 1.0, 0.0),
            Err(Error::SingularSystem(_))
        ));
        let q = QuadraticLocal::new(h, b, 1.0, 0.1).unwrap();
        assert!((q.strong_convexity() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn kl_conjugate_cases() {
        let k = KlLocal::new(vec![0.2, 0.3, 0.5]).unwrap();
        let mut x = [0.0; 3];
        k.conjugate_argmax(&[0.0; 3], &mut x);
        assert!(x.iter().zip(k.q()).all(|(a, b)| (a - b).abs() < 1e-15));
        k.conjugate_argmax(&[-3.7; 3], &mut x);
        assert!(x.iter().zip(k.q()).all(|(a, b)| (a - b).abs() < 1e-15));

        let half = KlLocal::new(vec![0.5, 0.5]).unwrap();
        let mut x = [0.0; 2];
        half.conjugate_argmax(&[2f64.ln(), 0.0], &mut x);
        assert!((x[0] - 2.0 / 3.0).abs() < 1e-15 && (x[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kl_conjugate_matches_grid_search() {
        // maximize z·x − KL(x‖q) over the 1-simplex by brute force
        let k = KlLocal::new(vec![0.5, 0.5]).unwrap();
        let z = [2f64.ln(), 0.0];
        let steps = 200_000;
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
        for s in 1..steps {
            let a = s as f64 / steps as f64;
            let x = [a, 1.0 - a];
            let v = z[0] * x[0] + z[1] * x[1] - k.evaluate(&x);
            if v > best {
                best = v;
                arg = a;
            }
        }
        assert!((arg - 2.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn kl_validation() {
        assert!(KlLocal::new(vec![0.5, 0.6]).is_err());
        assert!(KlLocal::new(vec![1.0, 0.0]).is_err());
        assert!(KlLocal::new(vec![]).is_err());
    }

    #[test]
    fn stacked_conjugate_examples() {
        let set = ObjectiveSet::new(vec![
            LocalObjective::Quadratic(identity_quadratic(&[0.0, 0.0])),
            LocalObjective::Quadratic(identity_quadratic(&[0.0, 0.0])),
        ])
        .unwrap();
        let z = [1.0, -2.0, 3.0, 0.5];
        assert_eq!(set.stacked_conjugate(&z).unwrap(), z.to_vec());

        let q = vec![0.1, 0.6, 0.3];
        let kl = ObjectiveSet::new(vec![
            LocalObjective::Kl(KlLocal::new(q.clone()).unwrap()),
            LocalObjective::Kl(KlLocal::new(q.clone()).unwrap()),
        ])
        .unwrap();
        let x = kl.stacked_conjugate(&[0.0; 6]).unwrap();
        for (a, b) in x.iter().zip(q.iter().chain(&q)) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            kl.stacked_conjugate(&[0.0; 5]),
            Err(Error::DimensionMismatch { expected: 6, got: 5 })
        ));
    }

    #[test]
    fn stacked_conjugate_mixed_matches_blocks() {
        let reg = regression_instance(2, 3, 4, 0.0, 1).unwrap();
        let kl = kl_instance(2, 3, 2).unwrap();
        let set = ObjectiveSet::new(reg.iter().chain(kl.iter()).cloned().collect()).unwrap();
        assert_eq!(set.family(), None);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let stacked = set.stacked_conjugate(&z).unwrap();
        for i in 0..4 {
            let mut block = [0.0; 3];
            set.get(i).conjugate_argmax(&z[i * 3..i * 3 + 3], &mut block);
            assert_eq!(&stacked[i * 3..i * 3 + 3], &block);
        }
    }

    #[test]
    fn simplex_projection() {
        let mut x = [0.5, 0.5, 0.5];
        project_simplex(&mut x, 0.0);
        assert!(x.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let mut x = [2.0, -1.0, 0.0];
        project_simplex(&mut x, 0.0);
        assert_eq!(x, [1.0, 0.0, 0.0]);
        let mut x = [2.0, -1.0, 0.0];
        project_simplex(&mut x, 1e-3);
        assert!((x.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(x.iter().all(|&v| v >= 1e-3));
        let mut x = [0.2, 0.3, 0.5];
        project_simplex(&mut x, 0.0);
        assert!((x[0] - 0.2).abs() < 1e-15 && (x[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn instances_are_reproducible() {
        let a = regression_instance(3, 2, 4, 0.0, 5).unwrap();
        let b = regression_instance(3, 2, 4, 0.0, 5).unwrap();
        let x = [0.3, 0.1, -0.2, 0.9, 1.0, 0.0];
        assert_eq!(a.aggregate_value(&x).unwrap(), b.aggregate_value(&x).unwrap());
    }
}
