//! TOML experiment configuration.
//!
//! ```toml
//! experiment = "regression"      # regression | kl_barycenter | custom
//! method = "heavy_ball_rk"       # heavy_ball_rk | cgd | dgd | dual_nag | dual_gd
//! order = 4
//! iterations = 2000
//! h0 = "sweep"                   # a number, "default" or "sweep"
//! seed = 7
//! output = "trace.csv"
//!
//! [graph]
//! kind = "erdos_renyi"
//! nodes = 20
//! edge_probability = 0.3
//!
//! [problem]
//! dim = 10
//! samples = 10
//! ridge = 1e-3
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::graph::{Topology, TopologyKind};
use crate::harness::ReportStyle;
use crate::integrator::{tableau, ButcherTableau, TableauKind};
use crate::objectives::{
    kl_instance, read_matrix_csv, regression_instance, KlLocal, LocalObjective, ObjectiveSet, QuadraticLocal,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Regression,
    KlBarycenter,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    HeavyBallRk,
    Cgd,
    Dgd,
    DualNag,
    /// Dual gradient descent: DualNAG without momentum.
    DualGd,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::HeavyBallRk => "heavy_ball_rk",
            Method::Cgd => "cgd",
            Method::Dgd => "dgd",
            Method::DualNag => "dual_nag",
            Method::DualGd => "dual_gd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Star,
    Cycle,
    ErdosRenyi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub kind: GraphKind,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_edge_probability")]
    pub edge_probability: f64,
    /// Defaults to the experiment seed plus one.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_nodes() -> usize {
    100
}

fn default_edge_probability() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CustomFamily {
    Quadratic,
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Decision dimension `p`.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Data points per agent `l` (regression).
    #[serde(default = "default_dim")]
    pub samples: usize,
    #[serde(default)]
    pub ridge: f64,
    /// Custom experiments: directory holding `H_<i>.csv` and `b_<i>.csv` (quadratic) or
    /// `q_<i>.csv` (KL) for each agent, relative to the config file.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub family: Option<CustomFamily>,
}

fn default_dim() -> usize {
    100
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            dim: default_dim(),
            samples: default_dim(),
            ridge: 0.0,
            data_dir: None,
            family: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableauConfig {
    #[serde(default = "default_tableau_name")]
    pub name: String,
    pub order: u32,
    /// Strictly lower-triangular rows; row `i` holds `i` entries.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

fn default_tableau_name() -> String {
    "custom".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum H0Setting {
    Value(f64),
    Keyword(String),
}

impl Default for H0Setting {
    fn default() -> Self {
        H0Setting::Keyword("default".into())
    }
}

/// Resolved meaning of the `h0` key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum H0Choice {
    Fixed(f64),
    /// `μ / (4·λ_max(L))`
    Default,
    Sweep,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Gradient step (CGD, DGD).
    #[serde(default)]
    pub alpha: Option<f64>,
    /// DGD mixing weight in `W = I − βL`.
    #[serde(default)]
    pub beta: Option<f64>,
    /// DGD step decay `α/√k`.
    #[serde(default)]
    pub decay: Option<bool>,
    /// Dual step `h` (DualNAG, dual GD).
    #[serde(default)]
    pub step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "default_method")]
    pub method: Method,
    pub graph: GraphConfig,
    #[serde(default)]
    pub problem: ProblemConfig,
    /// Integrator order `s` for the built-in tableaux (1, 2 or 4).
    #[serde(default)]
    pub order: Option<u32>,
    #[serde(default)]
    pub tableau: Option<TableauConfig>,
    pub iterations: usize,
    #[serde(default)]
    pub h0: H0Setting,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub report_style: ReportStyle,
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

fn default_method() -> Method {
    Method::HeavyBallRk
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidParameter(msg) => Error::InvalidParameter(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        self.topology()?.validate()?;
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.problem.dim == 0 || self.problem.samples == 0 {
            return bad("problem.dim and problem.samples must be positive".into());
        }
        if !(self.problem.ridge >= 0.0) {
            return bad(format!(
                "problem.ridge must be non-negative, got {}",
                self.problem.ridge
            ));
        }
        self.h0_choice()?;
        if self.experiment == ExperimentKind::Custom
            && (self.problem.data_dir.is_none() || self.problem.family.is_none())
        {
            return bad("custom experiments need problem.data_dir and problem.family".into());
        }
        match self.method {
            Method::HeavyBallRk => {
                self.tableau()?;
            }
            _ => {
                if self.order.is_some() || self.tableau.is_some() {
                    return bad(format!(
                        "order/tableau only apply to heavy_ball_rk, not {}",
                        self.method.label()
                    ));
                }
            }
        }
        let b = &self.baseline;
        for (name, v) in [("alpha", b.alpha), ("step", b.step)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return bad(format!("baseline.{name} must be positive, got {v}"));
                }
            }
        }
        if let Some(beta) = b.beta {
            if !(beta >= 0.0) || !beta.is_finite() {
                return bad(format!("baseline.beta must be non-negative, got {beta}"));
            }
        }
        Ok(())
    }

    pub fn h0_choice(&self) -> Result<H0Choice> {
        match &self.h0 {
            H0Setting::Value(v) if *v > 0.0 && v.is_finite() => Ok(H0Choice::Fixed(*v)),
            H0Setting::Value(v) => Err(Error::InvalidParameter(format!("h0 must be positive, got {v}"))),
            H0Setting::Keyword(k) if k == "default" => Ok(H0Choice::Default),
            H0Setting::Keyword(k) if k == "sweep" => Ok(H0Choice::Sweep),
            H0Setting::Keyword(k) => Err(Error::InvalidParameter(format!(
                "h0 must be a number, \"default\" or \"sweep\", got {k:?}"
            ))),
        }
    }

    pub fn graph_seed(&self) -> u64 {
        self.graph.seed.unwrap_or(self.seed.wrapping_add(1))
    }

    pub fn topology(&self) -> Result<Topology> {
        let kind = match self.graph.kind {
            GraphKind::Star => TopologyKind::Star,
            GraphKind::Cycle => TopologyKind::Cycle,
            GraphKind::ErdosRenyi => TopologyKind::ErdosRenyi {
                edge_probability: self.graph.edge_probability,
                seed: self.graph_seed(),
            },
        };
        Topology::new(kind, self.graph.nodes)
    }

    /// The integrator for `heavy_ball_rk`: a user tableau, or the built-in one for
    /// `order` (default 4).
    pub fn tableau(&self) -> Result<ButcherTableau> {
        match (&self.tableau, self.order) {
            (Some(_), Some(_)) => Err(Error::InvalidParameter(
                "give either order or [tableau], not both".into(),
            )),
            (Some(t), None) => ButcherTableau::new(t.name.clone(), t.order, t.a.clone(), t.b.clone()),
            (None, order) => {
                let s = order.unwrap_or(4);
                TableauKind::for_order(s)
                    .map(tableau)
                    .ok_or_else(|| Error::InvalidParameter(format!("order must be 1, 2 or 4, got {s}")))
            }
        }
    }

    /// Builds the per-agent objectives. `base_dir` resolves a relative `data_dir`.
    pub fn objectives(&self, base_dir: &Path) -> Result<ObjectiveSet> {
        let n = self.graph.nodes;
        let p = self.problem.dim;
        match self.experiment {
            ExperimentKind::Regression => {
                regression_instance(n, p, self.problem.samples, self.problem.ridge, self.seed)
            }
            ExperimentKind::KlBarycenter => kl_instance(n, p, self.seed),
            ExperimentKind::Custom => {
                let dir = base_dir.join(self.problem.data_dir.as_ref().expect("validated"));
                load_custom(&dir, n, self.problem.family.expect("validated"), self.problem.ridge)
            }
        }
    }
}

fn load_custom(dir: &Path, n: usize, family: CustomFamily, ridge: f64) -> Result<ObjectiveSet> {
    let locals = (0..n)
        .map(|i| {
            let local = match family {
                CustomFamily::Quadratic => {
                    let h = read_matrix_csv(&dir.join(format!("H_{i}.csv")))?;
                    let b = read_matrix_csv(&dir.join(format!("b_{i}.csv")))?;
                    if b.len() != h.nrows() {
                        return Err(Error::DimensionMismatch {
                            expected: h.nrows(),
                            got: b.len(),
                        });
                    }
                    let scale = 1.0 / (n * h.nrows()) as f64;
                    let b = DVector::from_iterator(b.len(), b.iter().copied());
                    LocalObjective::Quadratic(QuadraticLocal::new(h, b, scale, ridge)?)
                }
                CustomFamily::Kl => {
                    let q = read_matrix_csv(&dir.join(format!("q_{i}.csv")))?;
                    LocalObjective::Kl(KlLocal::new(q.iter().copied().collect())?)
                }
            };
            Ok(local)
        })
        .collect::<Result<Vec<_>>>()?;
    ObjectiveSet::new(locals)
}
