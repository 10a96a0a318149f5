//! Experiment configuration: a versioned TOML document validated against
//! every module's preconditions before any compute starts.
//!
//! Unknown keys are rejected at parse time; semantic validation collects
//! every violation instead of stopping at the first. The `t_max <= (L/4)^2`
//! wrap-around rule is enforced as a recorded warning, not an error.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::environment::{ConductanceLaw, LocalObservable};
use crate::error::{Error, Result};
use crate::heat::{default_dt, stability_bound};
use crate::lattice::MAX_VERTICES;

pub const SCHEMA_VERSION: u32 = 1;

/// Side-length caps keeping dense kernel storage within memory.
const MAX_SIDE_D2: usize = 256;
const MAX_SIDE_D3: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Relax,
    Kernel,
    Corrector,
    Weights,
    Necessity,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExperimentKind::Relax => "relax",
            ExperimentKind::Kernel => "kernel",
            ExperimentKind::Corrector => "corrector",
            ExperimentKind::Weights => "weights",
            ExperimentKind::Necessity => "necessity",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaxSpec {
    pub p_list: Vec<u32>,
    pub reps: usize,
    pub fit_window: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelSpec {
    pub fit_window: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrectorSpec {
    pub direction: usize,
    pub mu_list: Vec<f64>,
    pub p_list: Vec<u32>,
    pub reps: usize,
    pub tol: f64,
    pub jacobi: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightsSpec {
    pub q_list: Vec<f64>,
    pub reps: usize,
    pub moderation_q: f64,
    pub moderation_r_exponent: f64,
    pub detour_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NecessitySpec {
    pub theta: Vec<f64>,
    pub q: u32,
    pub reps: usize,
}

/// A fully validated experiment configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub seed: u64,
    /// Worker threads; 0 means all available cores.
    pub threads: usize,
    pub dim: usize,
    pub side: usize,
    /// One law per direction.
    pub laws: Vec<ConductanceLaw>,
    pub observable: LocalObservable,
    pub dt: f64,
    pub t_grid: Vec<f64>,
    pub relax: Option<RelaxSpec>,
    pub kernel: Option<KernelSpec>,
    pub corrector: Option<CorrectorSpec>,
    pub weights: Option<WeightsSpec>,
    pub necessity: Option<NecessitySpec>,
    pub out_dir: PathBuf,
    /// Soft-rule violations recorded at validation time.
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    experiment: Option<ExperimentKind>,
    seed: Option<u64>,
    threads: Option<usize>,
    lattice: Option<RawLattice>,
    #[serde(default)]
    law: Vec<ConductanceLaw>,
    observable: Option<LocalObservable>,
    evolution: Option<RawEvolution>,
    relax: Option<RawRelax>,
    kernel: Option<RawKernel>,
    corrector: Option<RawCorrector>,
    weights: Option<RawWeights>,
    necessity: Option<RawNecessity>,
    output: Option<RawOutput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLattice {
    d: Option<usize>,
    side: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvolution {
    dt: Option<f64>,
    t_grid: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRelax {
    p_list: Option<Vec<u32>>,
    reps: Option<usize>,
    fit_window: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKernel {
    fit_window: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorrector {
    direction: Option<usize>,
    mu_list: Option<Vec<f64>>,
    p_list: Option<Vec<u32>>,
    reps: Option<usize>,
    tol: Option<f64>,
    jacobi: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    q_list: Option<Vec<f64>>,
    reps: Option<usize>,
    moderation_q: Option<f64>,
    moderation_r_exponent: Option<f64>,
    detour_epsilon: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNecessity {
    theta: Option<Vec<f64>>,
    q: Option<u32>,
    reps: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
}

/// Parse and validate a configuration document. On failure every detected
/// violation is listed, not just the first.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text)
        .map_err(|e| Error::InvalidConfig(vec![format!("parse error: {e}")]))?;
    validate(raw)
}

fn validate(raw: RawConfig) -> Result<ExperimentConfig> {
    let mut errors: Vec<String> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();

    match raw.schema_version {
        None => errors.push("missing required key `schema_version`".into()),
        Some(v) if v != SCHEMA_VERSION => {
            errors.push(format!(
                "unsupported schema_version {v}; this build reads version {SCHEMA_VERSION}"
            ));
        }
        _ => {}
    }
    let experiment = raw.experiment;
    if experiment.is_none() {
        errors.push(
            "missing required key `experiment` (relax | kernel | corrector | weights | necessity)"
                .into(),
        );
    }

    // Lattice.
    let (dim, side) = match &raw.lattice {
        None => {
            errors.push("missing required table `[lattice]` with keys `d` and `side`".into());
            (0, 0)
        }
        Some(l) => {
            let d = l.d.unwrap_or_else(|| {
                errors.push("missing required key `lattice.d`".into());
                0
            });
            let s = l.side.unwrap_or_else(|| {
                errors.push("missing required key `lattice.side`".into());
                0
            });
            (d, s)
        }
    };
    let lattice_ok = dim >= 1 && side >= 3;
    if raw.lattice.is_some() {
        if dim < 1 {
            errors.push(format!("lattice.d must be >= 1, got {dim}"));
        }
        if side < 3 {
            errors.push(format!("lattice.side must be >= 3, got {side}"));
        }
        if lattice_ok {
            let vertices = (side as f64).powi(dim as i32);
            if vertices > MAX_VERTICES as f64 {
                errors.push(format!(
                    "lattice has {side}^{dim} vertices, above the cap {MAX_VERTICES}"
                ));
            }
            if dim == 2 && side > MAX_SIDE_D2 {
                errors.push(format!(
                    "lattice.side {side} exceeds the d=2 cap {MAX_SIDE_D2}"
                ));
            }
            if dim == 3 && side > MAX_SIDE_D3 {
                errors.push(format!(
                    "lattice.side {side} exceeds the d=3 cap {MAX_SIDE_D3}"
                ));
            }
        }
    }

    let is_necessity = experiment == Some(ExperimentKind::Necessity);

    // Laws: one entry broadcasts to every direction.
    let mut laws: Vec<ConductanceLaw> = Vec::new();
    if is_necessity {
        if !raw.law.is_empty() {
            errors.push(
                "necessity derives its law from `necessity.theta`; remove the [[law]] entries"
                    .into(),
            );
        }
    } else if raw.law.is_empty() {
        errors.push("missing [[law]] entries (one per direction, or one for all)".into());
    } else {
        for law in &raw.law {
            if let Err(e) = law.validate() {
                errors.push(e.to_string());
            }
        }
        if lattice_ok {
            if raw.law.len() == 1 {
                laws = vec![raw.law[0].clone(); dim];
            } else if raw.law.len() == dim {
                laws = raw.law.clone();
            } else {
                errors.push(format!(
                    "expected 1 or {dim} [[law]] entries, got {}",
                    raw.law.len()
                ));
            }
        }
    }

    // Observable (defaults to the centered conductance one step from the
    // origin in direction 0).
    let observable = raw.observable.clone().unwrap_or_else(|| {
        let mut offset = vec![0i64; dim.max(1)];
        offset[0] = 1;
        LocalObservable::CenteredConductance {
            offset,
            direction: 0,
        }
    });
    if lattice_ok {
        if let Err(e) = observable.validate(dim) {
            errors.push(e.to_string());
        } else if observable.support_radius() > side / 2 {
            errors.push(format!(
                "observable support radius {} exceeds the torus half-width {}",
                observable.support_radius(),
                side / 2
            ));
        }
    }

    // Evolution grid.
    let dt = raw
        .evolution
        .as_ref()
        .and_then(|e| e.dt)
        .unwrap_or_else(|| default_dt(dim.max(1)));
    let t_grid = raw
        .evolution
        .as_ref()
        .and_then(|e| e.t_grid.clone())
        .unwrap_or_else(|| vec![0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]);
    if lattice_ok {
        let bound = stability_bound(dim);
        if !(dt > 0.0) || dt > bound {
            errors.push(format!(
                "evolution.dt = {dt} violates the stability rule dt <= 1/(2d) = {bound}"
            ));
        }
        if t_grid.is_empty() {
            errors.push("evolution.t_grid must not be empty".into());
        }
        if t_grid.iter().any(|t| !t.is_finite() || *t < 0.0) {
            errors.push("evolution.t_grid times must be finite and >= 0".into());
        }
        if t_grid.windows(2).any(|w| w[1] <= w[0]) {
            errors.push("evolution.t_grid must be strictly increasing".into());
        }
        let t_max = t_grid.last().copied().unwrap_or(0.0);
        let wrap_budget = (side as f64 / 4.0).powi(2);
        if t_max > wrap_budget {
            warnings.push(format!(
                "t_max = {t_max} exceeds the wrap-around budget (side/4)^2 = {wrap_budget}; \
                 late-time results may feel the periodic boundary"
            ));
        }
    }

    let needs = |errors: &mut Vec<String>, kind: &str| {
        errors.push(format!("experiment `{kind}` requires the [{kind}] table"));
    };

    // Per-kind sections.
    let default_window = |t_grid: &[f64]| -> (f64, f64) {
        let hi = t_grid.last().copied().unwrap_or(64.0);
        (4.0, hi)
    };
    let mut relax = None;
    let mut kernel = None;
    let mut corrector = None;
    let mut weights = None;
    let mut necessity = None;
    match experiment {
        Some(ExperimentKind::Relax) => match &raw.relax {
            None => needs(&mut errors, "relax"),
            Some(r) => {
                let reps = r.reps.unwrap_or(0);
                if reps < 2 {
                    errors.push("relax.reps must be at least 2".into());
                }
                let p_list = r.p_list.clone().unwrap_or_else(|| vec![1]);
                if p_list.is_empty() || p_list.iter().any(|&p| p < 1) {
                    errors.push("relax.p_list must hold integers >= 1".into());
                }
                let fit_window = r
                    .fit_window
                    .map(|w| (w[0], w[1]))
                    .unwrap_or_else(|| default_window(&t_grid));
                if fit_window.0 >= fit_window.1 || fit_window.0 < 0.0 {
                    errors.push("relax.fit_window must be an increasing pair of times".into());
                }
                relax = Some(RelaxSpec {
                    p_list,
                    reps,
                    fit_window,
                });
            }
        },
        Some(ExperimentKind::Kernel) => {
            let fit_window = raw
                .kernel
                .as_ref()
                .and_then(|k| k.fit_window)
                .map(|w| (w[0], w[1]))
                .unwrap_or_else(|| default_window(&t_grid));
            if fit_window.0 >= fit_window.1 || fit_window.0 < 0.0 {
                errors.push("kernel.fit_window must be an increasing pair of times".into());
            }
            kernel = Some(KernelSpec { fit_window });
        }
        Some(ExperimentKind::Corrector) => match &raw.corrector {
            None => needs(&mut errors, "corrector"),
            Some(c) => {
                let direction = c.direction.unwrap_or(0);
                if lattice_ok && direction >= dim {
                    errors.push(format!(
                        "corrector.direction {direction} out of range for d = {dim}"
                    ));
                }
                let mu_list = c
                    .mu_list
                    .clone()
                    .unwrap_or_else(|| vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3]);
                if mu_list.is_empty()
                    || mu_list[0] <= 0.0
                    || mu_list.windows(2).any(|w| w[1] >= w[0] || w[1] <= 0.0)
                {
                    errors
                        .push("corrector.mu_list must be positive and strictly decreasing".into());
                }
                let p_list = c.p_list.clone().unwrap_or_else(|| vec![2]);
                if p_list.is_empty() || p_list.iter().any(|&p| p < 1) {
                    errors.push("corrector.p_list must hold integers >= 1".into());
                }
                let reps = c.reps.unwrap_or(0);
                if reps < 1 {
                    errors.push("corrector.reps must be at least 1".into());
                }
                let tol = c.tol.unwrap_or(1e-10);
                if !(tol > 0.0 && tol < 1.0) {
                    errors.push(format!("corrector.tol must be in (0, 1), got {tol}"));
                }
                corrector = Some(CorrectorSpec {
                    direction,
                    mu_list,
                    p_list,
                    reps,
                    tol,
                    jacobi: c.jacobi.unwrap_or(false),
                });
            }
        },
        Some(ExperimentKind::Weights) => match &raw.weights {
            None => needs(&mut errors, "weights"),
            Some(w) => {
                let q_list = w.q_list.clone().unwrap_or_else(|| vec![1.0, 2.0, 4.0]);
                if q_list.is_empty() || q_list.iter().any(|&q| !(q >= 1.0)) {
                    errors.push("weights.q_list entries must be >= 1".into());
                }
                let reps = w.reps.unwrap_or(0);
                if reps < 1 {
                    errors.push("weights.reps must be at least 1".into());
                }
                let moderation_q = w.moderation_q.unwrap_or(1.0);
                let moderation_r_exponent = w.moderation_r_exponent.unwrap_or(1.0);
                if !(moderation_q > 0.0) || !(moderation_r_exponent > 0.0) {
                    errors.push("weights moderation exponents must be positive".into());
                }
                if let Some(eps) = w.detour_epsilon {
                    if !(eps > 0.0) {
                        errors.push(format!(
                            "weights.detour_epsilon must be positive, got {eps}"
                        ));
                    }
                }
                weights = Some(WeightsSpec {
                    q_list,
                    reps,
                    moderation_q,
                    moderation_r_exponent,
                    detour_epsilon: w.detour_epsilon,
                });
            }
        },
        Some(ExperimentKind::Necessity) => match &raw.necessity {
            None => needs(&mut errors, "necessity"),
            Some(n) => {
                let mut theta = n.theta.clone().unwrap_or_default();
                if theta.is_empty() {
                    errors.push("missing required key `necessity.theta`".into());
                } else if lattice_ok {
                    if theta.len() == 1 {
                        theta = vec![theta[0]; dim];
                    } else if theta.len() != dim {
                        errors.push(format!(
                            "expected 1 or {dim} necessity.theta entries, got {}",
                            theta.len()
                        ));
                    }
                }
                if theta.iter().any(|&t| !(t > 0.0)) {
                    errors.push("necessity.theta entries must be positive".into());
                }
                let q = n.q.unwrap_or(0);
                if q < 1 {
                    errors.push("necessity.q must be an integer >= 1".into());
                }
                let reps = n.reps.unwrap_or(0);
                if reps < 2 {
                    errors.push("necessity.reps must be at least 2".into());
                }
                necessity = Some(NecessitySpec { theta, q, reps });
            }
        },
        None => {}
    }

    if is_necessity {
        if let Some(n) = &necessity {
            laws = n
                .theta
                .iter()
                .map(|&theta| ConductanceLaw::PowerLawNearZero { theta })
                .collect();
        }
    }

    if !errors.is_empty() {
        return Err(Error::InvalidConfig(errors));
    }
    Ok(ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        experiment: experiment.expect("validated"),
        seed: raw.seed.unwrap_or(0),
        threads: raw.threads.unwrap_or(0),
        dim,
        side,
        laws,
        observable,
        dt,
        t_grid,
        relax,
        kernel,
        corrector,
        weights,
        necessity,
        out_dir: PathBuf::from(
            raw.output
                .and_then(|o| o.dir)
                .unwrap_or_else(|| "out".into()),
        ),
        warnings,
    })
}
