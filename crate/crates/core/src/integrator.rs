//! Explicit Runge–Kutta stepping parameterized by Butcher tableaux.
//!
//! Only autonomous fields are supported; callers carry time inside the state.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableauKind {
    Euler1,
    Midpoint2,
    ClassicalRk4,
}

impl TableauKind {
    pub fn for_order(order: u32) -> Option<Self> {
        match order {
            1 => Some(TableauKind::Euler1),
            2 => Some(TableauKind::Midpoint2),
            4 => Some(TableauKind::ClassicalRk4),
            _ => None,
        }
    }
}

/// Coefficients of an explicit method. Row `i` of `a` holds `a_{i,0..i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ButcherTableau {
    pub name: String,
    pub order: u32,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

pub fn tableau(kind: TableauKind) -> ButcherTableau {
    let (name, order, a, b) = match kind {
        TableauKind::Euler1 => ("euler1", 1, vec![vec![]], vec![1.0]),
        TableauKind::Midpoint2 => ("midpoint2", 2, vec![vec![], vec![0.5]], vec![0.0, 1.0]),
        TableauKind::ClassicalRk4 => (
            "classical_rk4",
            4,
            vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        ),
    };
    ButcherTableau {
        name: name.to_string(),
        order,
        a,
        b,
    }
}

impl ButcherTableau {
    pub fn new(name: impl Into<String>, order: u32, a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        let stages = b.len();
        if stages == 0 || order == 0 {
            return Err(Error::InvalidTableau("need at least one stage and order >= 1".into()));
        }
        if a.len() != stages {
            return Err(Error::InvalidTableau(format!(
                "{} rows of a for {stages} stages",
                a.len()
            )));
        }
        for (i, row) in a.iter().enumerate() {
            if row.len() != i {
                return Err(Error::InvalidTableau(format!(
                    "row {i} of a has {} entries; an explicit method needs exactly {i}",
                    row.len()
                )));
            }
        }
        if a.iter().flatten().chain(&b).any(|c| !c.is_finite()) {
            return Err(Error::InvalidTableau("non-finite coefficient".into()));
        }
        let total: f64 = b.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidTableau(format!("weights sum to {total}, not 1")));
        }
        Ok(ButcherTableau {
            name: name.into(),
            order,
            a,
            b,
        })
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Coefficients `a_{l,0..l}` for stage `l`.
    pub fn stage_coefficients(&self, l: usize) -> &[f64] {
        &self.a[l]
    }

    pub fn weights(&self) -> &[f64] {
        &self.b
    }

    /// Node `c_l = Σ_j a_{lj}`.
    pub fn node(&self, l: usize) -> f64 {
        self.a[l].iter().sum()
    }

    #[doc(hidden)]
    pub fn with_weights_unchecked(mut self, b: Vec<f64>) -> Self {
        self.b = b;
        self
    }
}

impl fmt::Display for ButcherTableau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} (order {}, {} stages)", self.name, self.order, self.stages())?;
        for (l, row) in self.a.iter().enumerate() {
            write!(f, "{:>10.6} |", self.node(l))?;
            for j in 0..self.stages() {
                match row.get(j) {
                    Some(c) => write!(f, " {c:>10.6}")?,
                    None => write!(f, " {:>10}", "")?,
                }
            }
            writeln!(f)?;
        }
        write!(f, "{:>10} |", "")?;
        for c in &self.b {
            write!(f, " {c:>10.6}")?;
        }
        writeln!(f)
    }
}

/// An autonomous vector field `ζ ↦ G(ζ)`.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, state: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]),
{
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, state: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(state, out);
        Ok(())
    }
}

/// `out = base + h·Σ_j coeffs[j]·derivs[j]`, skipping zero coefficients.
///
/// Both the distributed and the whole-network paths form their stage points and
/// updates through this routine, so they round identically.
#[inline]
pub fn combine<D: AsRef<[f64]>>(base: &[f64], h: f64, coeffs: &[f64], derivs: &[D], out: &mut [f64]) {
    debug_assert!(derivs.len() >= coeffs.len());
    for (c, (o, &x)) in out.iter_mut().zip(base).enumerate() {
        let mut acc = 0.0;
        for (&a, d) in coeffs.iter().zip(derivs) {
            if a != 0.0 {
                acc += a * d.as_ref()[c];
            }
        }
        *o = x + h * acc;
    }
}

/// One explicit RK step: stages in order from previous stages only, then the
/// weighted combination. Performs exactly `S` field evaluations.
pub fn rk_step<V: VectorField + ?Sized>(
    tableau: &ButcherTableau,
    field: &V,
    state: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {h}")));
    }
    if state.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: state.len(),
        });
    }
    let stages = tableau.stages();
    let mut derivs: Vec<Vec<f64>> = Vec::with_capacity(stages);
    let mut point = vec![0.0; state.len()];
    for l in 0..stages {
        let coeffs = tableau.stage_coefficients(l);
        debug_assert_eq!(coeffs.len(), derivs.len(), "stage reads only computed stages");
        combine(state, h, coeffs, &derivs, &mut point);
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { iteration: 0 });
        }
        let mut k = vec![0.0; state.len()];
        field.eval(&point, &mut k)?;
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { iteration: 0 });
        }
        derivs.push(k);
    }
    let mut next = vec![0.0; state.len()];
    combine(state, h, tableau.weights(), &derivs, &mut next);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { iteration: 0 });
    }
    Ok(next)
}

/// Step sizes at which one-step errors are sampled by [`empirical_order`].
pub const ORDER_PROBE_STEPS: [f64; 5] = [0.4, 0.2, 0.1, 0.05, 0.025];

/// Estimates the order `s` of a tableau from one-step errors against an exact flow.
///
/// For each probe step `h`, the local error ratio `e(h)/e(h/2) ≈ 2^{s+1}`; the
/// estimate is the mean of `log₂(ratio) − 1`.
pub fn empirical_order<V, E>(tableau: &ButcherTableau, field: &V, exact_flow: E, start: &[f64]) -> Result<f64>
where
    V: VectorField + ?Sized,
    E: Fn(&[f64], f64) -> Vec<f64>,
{
    let err = |h: f64| -> Result<f64> {
        let approx = rk_step(tableau, field, start, h)?;
        let exact = exact_flow(start, h);
        let e = approx
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if e < 1e-14 {
            return Err(Error::DegenerateError { error: e });
        }
        Ok(e)
    };
    let mut total = 0.0;
    for &h in &ORDER_PROBE_STEPS {
        let ratio = err(h)? / err(h / 2.0)?;
        total += ratio.log2() - 1.0;
    }
    Ok(total / ORDER_PROBE_STEPS.len() as f64)
}

/// Order estimate on `ζ̇ = ζ` from `ζ₀ = 1`.
pub fn certify_order_on_growth(tableau: &ButcherTableau) -> Result<f64> {
    let field = FnField::new(1, |z: &[f64], out: &mut [f64]| out[0] = z[0]);
    empirical_order(tableau, &field, |z, h| vec![z[0] * h.exp()], &[1.0])
}
