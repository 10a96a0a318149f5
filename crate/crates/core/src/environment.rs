//! Random conductance environments: per-direction laws, sampling, shifts,
//! resampling, local observables, and the negative-moment condition on
//! `sup_i a(e_i)`.
//!
//! Every law has support inside [0, 1] and none is allowed to be a Dirac
//! mass at 0. Laws may differ across the d edge directions; conductances on
//! distinct edges are independent.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{divergence, EdgeField, ScalarField, TorusLattice};
use crate::math::{derive_seed, exp_integral_e1_scaled, u64_to_unit};

/// Distribution of a single direction's conductances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConductanceLaw {
    /// Dirac mass at `value`, with `value` in (0, 1].
    Constant { value: f64 },
    /// `hi` with probability `p`, `lo` with probability `1 - p`,
    /// where `0 <= lo < hi <= 1`.
    Bernoulli { p: f64, lo: f64, hi: f64 },
    /// `a = (1 + E)^-1` with `E` exponential of the given rate.
    InverseShiftedExponential { rate: f64 },
    /// Uniform on `[lo, hi]`, a subset of [0, 1].
    Uniform { lo: f64, hi: f64 },
    /// `a = U^(1/theta)`, so that `P(a <= eps) = eps^theta`.
    PowerLawNearZero { theta: f64 },
}

/// Behavior of a law's distribution function near zero. Determines whether
/// negative moments of the direction supremum are finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum ZeroClass {
    /// No mass below the threshold.
    BoundedBelow(f64),
    /// Distribution function decays like exp(-rate / eps).
    ExpSmall(f64),
    /// Distribution function behaves like eps^theta.
    PolySmall(f64),
    /// Positive mass exactly at zero.
    AtomAtZero,
}

impl ConductanceLaw {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidLaw(msg));
        match *self {
            ConductanceLaw::Constant { value } => {
                if !(value > 0.0 && value <= 1.0) {
                    return fail(format!("constant value must be in (0, 1], got {value}"));
                }
            }
            ConductanceLaw::Bernoulli { p, lo, hi } => {
                if !(0.0..=1.0).contains(&p) {
                    return fail(format!("bernoulli probability must be in [0, 1], got {p}"));
                }
                if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                    return fail(format!(
                        "bernoulli levels must satisfy 0 <= lo < hi <= 1, got lo={lo} hi={hi}"
                    ));
                }
                if lo == 0.0 && p == 0.0 {
                    return fail("bernoulli with lo = 0 and p = 0 is a Dirac mass at 0".into());
                }
            }
            ConductanceLaw::InverseShiftedExponential { rate } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    return fail(format!("exponential rate must be positive, got {rate}"));
                }
            }
            ConductanceLaw::Uniform { lo, hi } => {
                if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                    return fail(format!(
                        "uniform bounds must satisfy 0 <= lo < hi <= 1, got lo={lo} hi={hi}"
                    ));
                }
            }
            ConductanceLaw::PowerLawNearZero { theta } => {
                if !(theta > 0.0 && theta.is_finite()) {
                    return fail(format!("power-law exponent must be positive, got {theta}"));
                }
            }
        }
        Ok(())
    }

    /// Map one uniform draw in [0, 1) to a conductance via the inverse
    /// distribution function.
    pub fn sample_unit(&self, u: f64) -> f64 {
        match *self {
            ConductanceLaw::Constant { value } => value,
            ConductanceLaw::Bernoulli { p, lo, hi } => {
                if u < p {
                    hi
                } else {
                    lo
                }
            }
            ConductanceLaw::InverseShiftedExponential { rate } => {
                let e = -(1.0 - u).ln() / rate;
                1.0 / (1.0 + e)
            }
            ConductanceLaw::Uniform { lo, hi } => lo + u * (hi - lo),
            ConductanceLaw::PowerLawNearZero { theta } => u.powf(1.0 / theta),
        }
    }

    /// Exact mean, used for centering observables.
    pub fn mean(&self) -> f64 {
        match *self {
            ConductanceLaw::Constant { value } => value,
            ConductanceLaw::Bernoulli { p, lo, hi } => (1.0 - p) * lo + p * hi,
            ConductanceLaw::InverseShiftedExponential { rate } => {
                rate * exp_integral_e1_scaled(rate)
            }
            ConductanceLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
            ConductanceLaw::PowerLawNearZero { theta } => theta / (theta + 1.0),
        }
    }

    /// Exact variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let second = match *self {
            ConductanceLaw::Constant { value } => value * value,
            ConductanceLaw::Bernoulli { p, lo, hi } => (1.0 - p) * lo * lo + p * hi * hi,
            ConductanceLaw::InverseShiftedExponential { rate } => {
                // E[(1+E)^-2] = rate * (1 - rate * e^rate E1(rate)).
                rate * (1.0 - rate * exp_integral_e1_scaled(rate))
            }
            ConductanceLaw::Uniform { lo, hi } => (lo * lo + lo * hi + hi * hi) / 3.0,
            ConductanceLaw::PowerLawNearZero { theta } => theta / (theta + 2.0),
        };
        second - m * m
    }

    /// Distribution function P(a <= x).
    pub fn cdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match *self {
            ConductanceLaw::Constant { value } => {
                if x >= value {
                    1.0
                } else {
                    0.0
                }
            }
            ConductanceLaw::Bernoulli { p, lo, hi } => {
                let mut f = 0.0;
                if x >= lo {
                    f += 1.0 - p;
                }
                if x >= hi {
                    f += p;
                }
                f
            }
            ConductanceLaw::InverseShiftedExponential { rate } => {
                if x >= 1.0 {
                    1.0
                } else if x <= 0.0 {
                    0.0
                } else {
                    (-rate * (1.0 / x - 1.0)).exp()
                }
            }
            ConductanceLaw::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            ConductanceLaw::PowerLawNearZero { theta } => x.min(1.0).powf(theta),
        }
    }

    /// Essential supremum of the law.
    pub fn ess_sup(&self) -> f64 {
        match *self {
            ConductanceLaw::Constant { value } => value,
            ConductanceLaw::Bernoulli { p, lo, hi } => {
                if p > 0.0 {
                    hi
                } else {
                    lo
                }
            }
            ConductanceLaw::InverseShiftedExponential { .. } => 1.0,
            ConductanceLaw::Uniform { hi, .. } => hi,
            ConductanceLaw::PowerLawNearZero { .. } => 1.0,
        }
    }

    /// Default detour threshold: the median where the median leaves mass
    /// above it, otherwise a point strictly below the essential sup.
    pub fn detour_threshold(&self) -> f64 {
        match *self {
            ConductanceLaw::Constant { value } => 0.5 * value,
            ConductanceLaw::Bernoulli { p, lo, hi } => {
                if p > 0.0 {
                    0.5 * (lo + hi)
                } else {
                    0.5 * lo
                }
            }
            ConductanceLaw::InverseShiftedExponential { rate } => {
                1.0 / (1.0 + std::f64::consts::LN_2 / rate)
            }
            ConductanceLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
            ConductanceLaw::PowerLawNearZero { theta } => 2f64.powf(-1.0 / theta),
        }
    }

    pub(crate) fn zero_class(&self) -> ZeroClass {
        match *self {
            ConductanceLaw::Constant { value } => ZeroClass::BoundedBelow(value),
            ConductanceLaw::Bernoulli { p, lo, hi } => {
                if lo > 0.0 {
                    ZeroClass::BoundedBelow(lo)
                } else if p == 1.0 {
                    ZeroClass::BoundedBelow(hi)
                } else {
                    ZeroClass::AtomAtZero
                }
            }
            ConductanceLaw::InverseShiftedExponential { rate } => ZeroClass::ExpSmall(rate),
            ConductanceLaw::Uniform { lo, .. } => {
                if lo > 0.0 {
                    ZeroClass::BoundedBelow(lo)
                } else {
                    ZeroClass::PolySmall(1.0)
                }
            }
            ConductanceLaw::PowerLawNearZero { theta } => ZeroClass::PolySmall(theta),
        }
    }

    /// Points where the distribution function has a kink or jump, used to
    /// split quadrature intervals.
    fn knots(&self) -> Vec<f64> {
        match *self {
            ConductanceLaw::Constant { value } => vec![value],
            ConductanceLaw::Bernoulli { lo, hi, .. } => vec![lo, hi],
            ConductanceLaw::InverseShiftedExponential { .. } => vec![],
            ConductanceLaw::Uniform { lo, hi } => vec![lo, hi],
            ConductanceLaw::PowerLawNearZero { .. } => vec![],
        }
    }
}

fn validate_laws(laws: &[ConductanceLaw], dim: usize) -> Result<()> {
    if laws.len() != dim {
        return Err(Error::InvalidLaw(format!(
            "expected one law per direction ({dim}), got {}",
            laws.len()
        )));
    }
    for law in laws {
        law.validate()?;
    }
    Ok(())
}

/// A sampled conductance field together with the law it was drawn from and
/// the seed that produced it. Immutable after sampling.
#[derive(Debug, Clone)]
pub struct Environment {
    lattice: Arc<TorusLattice>,
    conductances: EdgeField,
    laws: Vec<ConductanceLaw>,
    seed: u64,
}

impl Environment {
    pub fn lattice(&self) -> &Arc<TorusLattice> {
        &self.lattice
    }

    pub fn conductances(&self) -> &EdgeField {
        &self.conductances
    }

    pub fn conductance(&self, e: usize) -> f64 {
        self.conductances.values()[e]
    }

    pub fn laws(&self) -> &[ConductanceLaw] {
        &self.laws
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Wrap an explicit conductance field, validating the [0, 1] support.
    pub fn from_conductances(
        lattice: &Arc<TorusLattice>,
        laws: Vec<ConductanceLaw>,
        values: Vec<f64>,
        seed: u64,
    ) -> Result<Environment> {
        validate_laws(&laws, lattice.dim())?;
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "conductance {bad} outside [0, 1]"
            )));
        }
        Ok(Environment {
            conductances: EdgeField::from_values(lattice, values)?,
            lattice: Arc::clone(lattice),
            laws,
            seed,
        })
    }

    /// `divergence(a * gradient(f))` for this environment's conductances.
    pub fn apply_generator(&self, f: &ScalarField) -> Result<ScalarField> {
        crate::lattice::apply_generator(&self.conductances, f)
    }

    /// Versioned dump: a JSON header line followed by (edge, conductance)
    /// CSV rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::json!({
            "d": self.lattice.dim(),
            "side": self.lattice.side(),
            "seed": self.seed,
            "laws": self.laws,
        });
        writeln!(w, "# rcm-env v1 {header}")?;
        writeln!(w, "edge,conductance")?;
        for (e, a) in self.conductances.values().iter().enumerate() {
            writeln!(w, "{e},{a}")?;
        }
        Ok(())
    }

    /// Parse a dump produced by [`Environment::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<Environment> {
        let bad = |msg: &str| Error::InvalidArgument(format!("environment dump: {msg}"));
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad("empty input"))??;
        let json = header
            .strip_prefix("# rcm-env v1 ")
            .ok_or_else(|| bad("missing `# rcm-env v1` header"))?;
        #[derive(Deserialize)]
        struct Header {
            d: usize,
            side: usize,
            seed: u64,
            laws: Vec<ConductanceLaw>,
        }
        let h: Header =
            serde_json::from_str(json).map_err(|e| bad(&format!("header json: {e}")))?;
        let lattice = TorusLattice::new(h.d, h.side)?;
        validate_laws(&h.laws, h.d)?;
        let mut values = vec![0.0; lattice.edge_count()];
        let mut seen = 0usize;
        for line in lines {
            let line = line?;
            if line.is_empty() || line.starts_with("edge,") {
                continue;
            }
            let (e, a) = line
                .split_once(',')
                .ok_or_else(|| bad(&format!("malformed row `{line}`")))?;
            let e: usize = e.parse().map_err(|_| bad("bad edge index"))?;
            let a: f64 = a.parse().map_err(|_| bad("bad conductance"))?;
            if e >= values.len() {
                return Err(bad(&format!("edge index {e} out of range")));
            }
            values[e] = a;
            seen += 1;
        }
        if seen != lattice.edge_count() {
            return Err(bad(&format!(
                "expected {} rows, got {seen}",
                lattice.edge_count()
            )));
        }
        Ok(Environment {
            conductances: EdgeField::from_values(&lattice, values)?,
            lattice,
            laws: h.laws,
            seed: h.seed,
        })
    }
}

/// Draw an environment with independent per-edge conductances; the law of an
/// edge depends only on its direction. Identical (laws, lattice, seed)
/// triples yield bit-identical fields.
pub fn sample_environment(
    laws: &[ConductanceLaw],
    lattice: &Arc<TorusLattice>,
    seed: u64,
) -> Result<Environment> {
    validate_laws(laws, lattice.dim())?;
    let d = lattice.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..lattice.edge_count())
        .map(|e| laws[e % d].sample_unit(u64_to_unit(rng.next_u64())))
        .collect();
    Ok(Environment {
        conductances: EdgeField::from_values(lattice, values)?,
        lattice: Arc::clone(lattice),
        laws: laws.to_vec(),
        seed,
    })
}

/// Translate the environment: the conductance of edge e in the output is the
/// conductance of edge x + e in the input.
pub fn shift(env: &Environment, x: usize) -> Environment {
    let lat = env.lattice();
    let d = lat.dim();
    let offset: Vec<i64> = lat.vertex_coords(x).iter().map(|&c| c as i64).collect();
    let old = env.conductances.values();
    let mut values = vec![0.0; lat.edge_count()];
    for v in 0..lat.vertex_count() {
        let w = lat.vertex_add(v, &offset);
        for i in 0..d {
            values[v * d + i] = old[w * d + i];
        }
    }
    Environment {
        conductances: EdgeField::from_values(lat, values).expect("shift preserves shape"),
        lattice: Arc::clone(lat),
        laws: env.laws.clone(),
        seed: env.seed,
    }
}

/// Redraw the conductance of a single edge from its direction's law,
/// leaving every other edge untouched.
pub fn resample_edge(env: &Environment, e: usize, seed: u64) -> Environment {
    let mut out = env.clone();
    let dir = env.lattice().edge_direction(e);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, e as u64));
    out.conductances.values_mut()[e] = env.laws[dir].sample_unit(u64_to_unit(rng.next_u64()));
    out
}

/// Outcome of the moment condition check for one exponent q.
#[derive(Debug, Clone, Serialize)]
pub struct MomentVerdict {
    pub q: f64,
    pub pass: bool,
    /// `< (sup_i a(e_i))^-q >` when it is finite and computable.
    pub value: Option<f64>,
    pub reason: Option<String>,
}

/// Check whether `< (sup_i a(e_i))^-q >` is finite for each requested q >= 1,
/// and evaluate it when it is.
///
/// The supremum's distribution function is the product of the per-direction
/// ones, so finiteness is decided exactly from each law's behavior near zero.
/// Values come from closed forms when the product is piecewise polynomial and
/// from adaptive quadrature of `1 + q int F(eps) eps^(-q-1) deps` otherwise.
pub fn moment_condition_check(
    laws: &[ConductanceLaw],
    q_list: &[f64],
) -> Result<Vec<MomentVerdict>> {
    if laws.is_empty() {
        return Err(Error::InvalidLaw("no laws given".into()));
    }
    for law in laws {
        law.validate()?;
    }
    for &q in q_list {
        if !(q >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "moment exponent must be >= 1, got {q}"
            )));
        }
    }
    let classes: Vec<ZeroClass> = laws.iter().map(|l| l.zero_class()).collect();
    let all_atom = classes.iter().all(|c| matches!(c, ZeroClass::AtomAtZero));
    let heavy_ok = classes
        .iter()
        .any(|c| matches!(c, ZeroClass::BoundedBelow(_) | ZeroClass::ExpSmall(_)));
    let theta_sum: f64 = classes
        .iter()
        .filter_map(|c| match c {
            ZeroClass::PolySmall(t) => Some(*t),
            _ => None,
        })
        .sum();

    let mut out = Vec::with_capacity(q_list.len());
    for &q in q_list {
        if all_atom {
            out.push(MomentVerdict {
                q,
                pass: false,
                value: None,
                reason: Some("P[sup = 0] > 0".into()),
            });
        } else if heavy_ok || q < theta_sum {
            out.push(MomentVerdict {
                q,
                pass: true,
                value: Some(sup_inverse_moment(laws, &classes, q)),
                reason: None,
            });
        } else {
            out.push(MomentVerdict {
                q,
                pass: false,
                value: None,
                reason: Some(format!(
                    "q = {q} >= {theta_sum} = sum of small-ball exponents; \
                     the moment diverges"
                )),
            });
        }
    }
    Ok(out)
}

/// `< sup^-q > = 1 + q int_0^1 F(eps) eps^(-q-1) deps` with
/// `F = prod_i cdf_i`, assuming finiteness was established.
fn sup_inverse_moment(laws: &[ConductanceLaw], classes: &[ZeroClass], q: f64) -> f64 {
    let eps_low = classes
        .iter()
        .filter_map(|c| match c {
            ZeroClass::BoundedBelow(e) => Some(*e),
            _ => None,
        })
        .fold(0.0f64, f64::max);
    let has_exp = classes.iter().any(|c| matches!(c, ZeroClass::ExpSmall(_)));

    if eps_low >= 1.0 {
        // Some direction is identically 1, so sup = 1 almost surely.
        return 1.0;
    }
    if eps_low > 0.0 {
        // Integrate on [eps_low, 1] in the variable y = ln(eps).
        let log_f = |eps: f64| laws.iter().map(|l| l.cdf(eps).ln()).sum::<f64>();
        let g = |y: f64| {
            let lf = log_f(y.exp());
            if lf.is_finite() {
                (lf - q * y).exp()
            } else {
                0.0
            }
        };
        let mut cuts: Vec<f64> = vec![eps_low.ln(), 0.0];
        for law in laws {
            for k in law.knots() {
                if k > eps_low && k < 1.0 {
                    cuts.push(k.ln());
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut integral = 0.0;
        for w in cuts.windows(2) {
            integral += adaptive_simpson(&g, w[0], w[1], 1e-9);
        }
        return 1.0 + q * integral;
    }
    if has_exp {
        // Substitute u = 1/eps; exponential factors written in log space.
        let log_g = |u: f64| {
            let mut lf = (q - 1.0) * u.ln();
            for law in laws {
                lf += match *law {
                    ConductanceLaw::InverseShiftedExponential { rate } => -rate * (u - 1.0),
                    _ => law.cdf(1.0 / u).ln(),
                };
            }
            lf
        };
        let g = |u: f64| {
            let lg = log_g(u);
            if lg.is_finite() {
                lg.exp()
            } else {
                0.0
            }
        };
        let mut u_max = 4.0;
        while log_g(u_max) > -80.0 && u_max < 1e12 {
            u_max *= 2.0;
        }
        let mut cuts: Vec<f64> = vec![1.0, u_max];
        for law in laws {
            for k in law.knots() {
                if k > 0.0 && 1.0 / k > 1.0 && 1.0 / k < u_max {
                    cuts.push(1.0 / k);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut integral = 0.0;
        for w in cuts.windows(2) {
            integral += adaptive_simpson(&g, w[0], w[1], 1e-9);
        }
        return 1.0 + q * integral;
    }
    // Remaining laws are power-like near zero with possible atoms: F is a
    // piecewise power C eps^s between knots, so the integral is exact.
    let mut cuts: Vec<f64> = vec![1.0];
    for law in laws {
        for k in law.knots() {
            if k > 0.0 && k < 1.0 {
                cuts.push(k);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut integral = 0.0;
    let mut lo = 0.0f64;
    for &hi in &cuts {
        let mid = 0.5 * (lo.max(f64::MIN_POSITIVE) + hi);
        let mut coeff = 1.0;
        let mut s = 0.0;
        for law in laws {
            match *law {
                ConductanceLaw::PowerLawNearZero { theta } => s += theta,
                ConductanceLaw::Uniform { lo: a, hi: b } => {
                    debug_assert_eq!(a, 0.0);
                    if mid < b {
                        s += 1.0;
                        coeff /= b;
                    }
                }
                _ => coeff *= law.cdf(mid),
            }
        }
        let exponent = s - q;
        integral += if exponent.abs() < 1e-12 {
            coeff * (hi / lo).ln()
        } else if lo == 0.0 {
            // exponent > 0 here by the finiteness check.
            coeff * hi.powf(exponent) / exponent
        } else {
            coeff * (hi.powf(exponent) - lo.powf(exponent)) / exponent
        };
        lo = hi;
    }
    1.0 + q * integral
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    if a >= b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let fa = f(a);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson(fa, fm, fb, b - a);
    let scale = whole
        .abs()
        .max(fa.abs().max(fm.abs()).max(fb.abs()) * (b - a));
    recurse(f, a, b, fa, fm, fb, whole, rel_tol * scale.max(1e-300), 20)
}

/// Monte-Carlo estimate of `< (sup_i a(e_i))^-q >`, the fallback route.
/// `diverging` is set when a draw hits sup = 0 or the running estimate keeps
/// growing between the half and full sample.
#[derive(Debug, Clone)]
pub struct McMomentEstimate {
    pub estimate: f64,
    pub diverging: bool,
}

pub fn sup_inverse_moment_mc(
    laws: &[ConductanceLaw],
    q: f64,
    draws: usize,
    seed: u64,
) -> Result<McMomentEstimate> {
    if laws.is_empty() {
        return Err(Error::InvalidLaw("no laws given".into()));
    }
    if !(q >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "moment exponent must be >= 1, got {q}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diverging = false;
    let mut sum_half = 0.0;
    let mut sum = 0.0;
    for i in 0..draws {
        let sup = laws
            .iter()
            .map(|l| l.sample_unit(u64_to_unit(rng.next_u64())))
            .fold(0.0f64, f64::max);
        let term = if sup > 0.0 {
            sup.powf(-q)
        } else {
            diverging = true;
            0.0
        };
        sum += term;
        if i < draws / 2 {
            sum_half += term;
        }
    }
    let estimate = sum / draws as f64;
    let half = sum_half / (draws / 2).max(1) as f64;
    if estimate > 0.0 && (estimate - half).abs() / estimate > 0.1 {
        diverging = true;
    }
    Ok(McMomentEstimate {
        estimate,
        diverging,
    })
}

/// A local function of the environment, evaluated through its stationary
/// extension: vertex x carries the observable applied to the environment
/// shifted by x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalObservable {
    /// `a(e~) - <a(e~)>` for the edge at `offset` in direction `direction`;
    /// bounded by 1 and centered by construction (the mean is the law's
    /// closed-form mean, never an empirical average).
    CenteredConductance { offset: Vec<i64>, direction: usize },
    /// The discrete divergence of the inner observable's stationary
    /// extension, placed as a flux in `direction`.
    DivergenceForm {
        direction: usize,
        inner: Box<LocalObservable>,
    },
}

impl LocalObservable {
    /// Number of conductances the observable depends on.
    pub fn support_size(&self) -> usize {
        match self {
            LocalObservable::CenteredConductance { .. } => 1,
            LocalObservable::DivergenceForm { inner, .. } => 2 * inner.support_size(),
        }
    }

    /// Radius (max-coordinate) of the support around the origin, used to
    /// check that shifted copies stay genuinely local on the torus.
    pub fn support_radius(&self) -> usize {
        match self {
            LocalObservable::CenteredConductance { offset, .. } => {
                offset
                    .iter()
                    .map(|c| c.unsigned_abs() as usize)
                    .max()
                    .unwrap_or(0)
                    + 1
            }
            LocalObservable::DivergenceForm { inner, .. } => inner.support_radius() + 1,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            LocalObservable::CenteredConductance { offset, direction } => {
                if *direction >= dim {
                    return Err(Error::InvalidArgument(format!(
                        "observable direction {direction} out of range for d = {dim}"
                    )));
                }
                if offset.len() != dim {
                    return Err(Error::InvalidArgument(format!(
                        "observable offset has {} coordinates, lattice has {dim}",
                        offset.len()
                    )));
                }
                Ok(())
            }
            LocalObservable::DivergenceForm { direction, inner } => {
                if *direction >= dim {
                    return Err(Error::InvalidArgument(format!(
                        "observable direction {direction} out of range for d = {dim}"
                    )));
                }
                inner.validate(dim)
            }
        }
    }
}

/// Evaluate the stationary extension of a local observable on the torus.
pub fn evaluate_observable(obs: &LocalObservable, env: &Environment) -> Result<ScalarField> {
    let lat = env.lattice();
    obs.validate(lat.dim())?;
    let half = lat.side() / 2;
    if obs.support_radius() > half {
        return Err(Error::SupportExceedsTorus {
            radius: obs.support_radius(),
            half_width: half,
        });
    }
    evaluate_unchecked(obs, env)
}

fn evaluate_unchecked(obs: &LocalObservable, env: &Environment) -> Result<ScalarField> {
    let lat = env.lattice();
    let d = lat.dim();
    match obs {
        LocalObservable::CenteredConductance { offset, direction } => {
            let mean = env.laws()[*direction].mean();
            let a = env.conductances().values();
            let values: Vec<f64> = (0..lat.vertex_count())
                .map(|v| a[lat.vertex_add(v, offset) * d + direction] - mean)
                .collect();
            ScalarField::from_values(lat, values)
        }
        LocalObservable::DivergenceForm { direction, inner } => {
            let f = evaluate_unchecked(inner, env)?;
            let mut flux = EdgeField::zeros(lat);
            {
                let hv = flux.values_mut();
                for (v, &fv) in f.values().iter().enumerate() {
                    hv[v * d + direction] = fv;
                }
            }
            Ok(divergence(&flux))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::TorusLattice;
    use crate::math::pairwise_sum;

    fn bern(p: f64, lo: f64, hi: f64) -> ConductanceLaw {
        ConductanceLaw::Bernoulli { p, lo, hi }
    }

    #[test]
    fn law_validation() {
        assert!(ConductanceLaw::Constant { value: 0.0 }.validate().is_err());
        assert!(ConductanceLaw::Constant { value: 1.0 }.validate().is_ok());
        assert!(bern(0.5, 0.6, 0.3).validate().is_err());
        assert!(bern(0.0, 0.0, 1.0).validate().is_err()); // Dirac at 0
        assert!(bern(0.0, 0.2, 1.0).validate().is_ok());
        assert!(ConductanceLaw::Uniform { lo: -0.1, hi: 0.5 }
            .validate()
            .is_err());
        assert!(ConductanceLaw::PowerLawNearZero { theta: 0.0 }
            .validate()
            .is_err());
        assert!(ConductanceLaw::InverseShiftedExponential { rate: 0.0 }
            .validate()
            .is_err());
    }

    #[test]
    fn degenerate_laws_sample_exactly() {
        let lat = TorusLattice::new(2, 4).unwrap();
        let env = sample_environment(
            &[
                ConductanceLaw::Constant { value: 1.0 },
                ConductanceLaw::Constant { value: 1.0 },
            ],
            &lat,
            3,
        )
        .unwrap();
        assert!(env.conductances().values().iter().all(|&a| a == 1.0));
        let env = sample_environment(&[bern(1.0, 0.0, 0.3), bern(1.0, 0.0, 0.3)], &lat, 3).unwrap();
        assert!(env.conductances().values().iter().all(|&a| a == 0.3));
    }

    #[test]
    fn bernoulli_empirical_mean_concentrates() {
        let lat = TorusLattice::new(2, 64).unwrap();
        let env =
            sample_environment(&[bern(0.5, 0.0, 1.0), bern(0.5, 0.0, 1.0)], &lat, 2024).unwrap();
        let mean = pairwise_sum(env.conductances().values()) / env.lattice().edge_count() as f64;
        assert!((0.47..=0.53).contains(&mean), "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let lat = TorusLattice::new(3, 4).unwrap();
        let laws = vec![
            ConductanceLaw::Uniform { lo: 0.0, hi: 1.0 },
            ConductanceLaw::InverseShiftedExponential { rate: 1.0 },
            ConductanceLaw::PowerLawNearZero { theta: 0.25 },
        ];
        let a = sample_environment(&laws, &lat, 99).unwrap();
        let b = sample_environment(&laws, &lat, 99).unwrap();
        assert_eq!(a.conductances().values(), b.conductances().values());
        // Byte-for-byte identical in serialized form as well.
        let (mut dump_a, mut dump_b) = (Vec::new(), Vec::new());
        a.write_csv(&mut dump_a).unwrap();
        b.write_csv(&mut dump_b).unwrap();
        assert_eq!(dump_a, dump_b);
        assert!(a
            .conductances()
            .values()
            .iter()
            .all(|&x| (0.0..=1.0).contains(&x)));
        let c = sample_environment(&laws, &lat, 100).unwrap();
        assert_ne!(a.conductances().values(), c.conductances().values());
    }

    #[test]
    fn directions_follow_their_own_laws() {
        // Kolmogorov-Smirnov style check that direction-i edges are
        // distributed under the i-th law component.
        let lat = TorusLattice::new(2, 64).unwrap();
        let laws = vec![
            ConductanceLaw::Uniform { lo: 0.0, hi: 1.0 },
            bern(0.3, 0.2, 0.9),
        ];
        let env = sample_environment(&laws, &lat, 6060).unwrap();
        let per_dir: Vec<Vec<f64>> = (0..2)
            .map(|i| {
                env.conductances()
                    .values()
                    .iter()
                    .enumerate()
                    .filter(|(e, _)| e % 2 == i)
                    .map(|(_, &a)| a)
                    .collect()
            })
            .collect();
        // Direction 0: uniform; sup |F_n - F| should be ~ 1/sqrt(n).
        let mut sorted = per_dir[0].clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let ks = sorted
            .iter()
            .enumerate()
            .map(|(k, &x)| ((k + 1) as f64 / n - laws[0].cdf(x)).abs())
            .fold(0.0f64, f64::max);
        assert!(ks <= 3.0 / n.sqrt(), "KS statistic {ks} too large");
        // Direction 1: two-point law with the right frequency.
        assert!(per_dir[1].iter().all(|&a| a == 0.2 || a == 0.9));
        let frac_hi = per_dir[1].iter().filter(|&&a| a == 0.9).count() as f64 / n;
        assert!((frac_hi - 0.3).abs() <= 3.0 * (0.3f64 * 0.7 / n).sqrt() + 0.01);
    }

    #[test]
    fn shift_is_a_group_action() {
        let lat = TorusLattice::new(2, 5).unwrap();
        let laws = vec![ConductanceLaw::Uniform { lo: 0.0, hi: 1.0 }; 2];
        let env = sample_environment(&laws, &lat, 7).unwrap();

        let same = shift(&env, 0);
        assert_eq!(same.conductances().values(), env.conductances().values());

        let x = lat.vertex_index(&[2, 1]);
        let minus_x = lat.vertex_index(&[3, 4]);
        let back = shift(&shift(&env, x), minus_x);
        assert_eq!(back.conductances().values(), env.conductances().values());

        let y = lat.vertex_index(&[1, 3]);
        let xy = lat.vertex_add(x, &[1, 3]);
        let a = shift(&shift(&env, x), y);
        let b = shift(&env, xy);
        assert_eq!(a.conductances().values(), b.conductances().values());
    }

    #[test]
    fn shift_1d_rotates() {
        let lat = TorusLattice::new(1, 4).unwrap();
        let env =
            sample_environment(&[ConductanceLaw::Uniform { lo: 0.0, hi: 1.0 }], &lat, 5).unwrap();
        let c: Vec<f64> = env.conductances().values().to_vec();
        let shifted = shift(&env, 1);
        assert_eq!(shifted.conductances().values(), &[c[1], c[2], c[3], c[0]]);
    }

    #[test]
    fn resample_touches_one_edge() {
        let lat = TorusLattice::new(2, 4).unwrap();
        let laws = vec![ConductanceLaw::Uniform { lo: 0.2, hi: 0.9 }; 2];
        let env = sample_environment(&laws, &lat, 11).unwrap();
        let out = resample_edge(&env, 5, 123);
        for e in 0..lat.edge_count() {
            if e != 5 {
                assert_eq!(out.conductance(e), env.conductance(e));
            }
        }
        for s in 0..1000u64 {
            let r = resample_edge(&env, 5, s);
            let v = r.conductance(5);
            assert!((0.2..=0.9).contains(&v));
        }
        let const_env = sample_environment(
            &[
                ConductanceLaw::Constant { value: 0.4 },
                ConductanceLaw::Constant { value: 0.4 },
            ],
            &lat,
            1,
        )
        .unwrap();
        let r = resample_edge(&const_env, 3, 77);
        assert_eq!(r.conductances().values(), const_env.conductances().values());
    }

    #[test]
    fn moment_check_fails_on_joint_atom() {
        let laws = vec![bern(0.5, 0.0, 1.0); 3];
        let verdicts = moment_condition_check(&laws, &[1.0, 4.0]).unwrap();
        for v in verdicts {
            assert!(!v.pass);
            assert_eq!(v.reason.as_deref(), Some("P[sup = 0] > 0"));
        }
    }

    #[test]
    fn moment_check_constant_direction_passes() {
        let laws = vec![ConductanceLaw::Constant { value: 1.0 }, bern(0.5, 0.0, 1.0)];
        let verdicts = moment_condition_check(&laws, &[1.0, 3.0, 10.0]).unwrap();
        for v in verdicts {
            assert!(v.pass);
            let value = v.value.unwrap();
            assert!((value - 1.0).abs() < 1e-12, "q={} value={value}", v.q);
        }
    }

    #[test]
    fn moment_check_ise_matches_gamma_oracle() {
        // For a single inverse-shifted-exponential direction with rate 1,
        // <sup^-q> = <(1+E)^q> = q! * sum_{k<=q} 1/k!.
        let laws = vec![ConductanceLaw::InverseShiftedExponential { rate: 1.0 }];
        let verdicts = moment_condition_check(&laws, &[1.0, 2.0, 3.0]).unwrap();
        let expected = [2.0, 5.0, 16.0];
        for (v, want) in verdicts.iter().zip(expected) {
            assert!(v.pass);
            let got = v.value.unwrap();
            assert!(
                (got - want).abs() < 1e-6 * want,
                "q={} got={got} want={want}",
                v.q
            );
        }
    }

    #[test]
    fn moment_check_paper_example_law_passes() {
        let laws = vec![
            bern(0.5, 0.0, 1.0),
            bern(0.5, 0.0, 1.0),
            ConductanceLaw::InverseShiftedExponential { rate: 1.0 },
        ];
        for v in moment_condition_check(&laws, &[1.0, 2.0, 5.0, 20.0]).unwrap() {
            assert!(v.pass, "q = {} should pass", v.q);
            assert!(v.value.unwrap().is_finite());
        }
        // Cross-check one value against Monte Carlo.
        let q = 2.0;
        let exact = moment_condition_check(&laws, &[q]).unwrap()[0]
            .value
            .unwrap();
        let mc = sup_inverse_moment_mc(&laws, q, 400_000, 5).unwrap();
        assert!(!mc.diverging);
        assert!(
            (mc.estimate - exact).abs() < 0.05 * exact,
            "mc={} exact={exact}",
            mc.estimate
        );
    }

    #[test]
    fn moment_check_power_law_closed_form() {
        let laws = vec![
            ConductanceLaw::PowerLawNearZero { theta: 2.0 },
            ConductanceLaw::PowerLawNearZero { theta: 3.0 },
        ];
        let verdicts = moment_condition_check(&laws, &[4.0, 5.0, 6.0]).unwrap();
        // theta_sum = 5: q = 4 passes with value 5/(5-4) = 5, the rest fail.
        assert!(verdicts[0].pass);
        assert!((verdicts[0].value.unwrap() - 5.0).abs() < 1e-10);
        assert!(!verdicts[1].pass);
        assert!(!verdicts[2].pass);
    }

    #[test]
    fn necessity_family_fails_every_q() {
        let laws = vec![ConductanceLaw::PowerLawNearZero { theta: 0.25 }; 3];
        for v in moment_condition_check(&laws, &[1.0, 8.0]).unwrap() {
            assert!(!v.pass);
        }
        let mc = sup_inverse_moment_mc(&laws, 8.0, 100_000, 9).unwrap();
        assert!(mc.diverging);
    }

    #[test]
    fn mixed_poly_atom_value_matches_monte_carlo() {
        let laws = vec![
            ConductanceLaw::PowerLawNearZero { theta: 3.0 },
            bern(0.5, 0.0, 0.6),
            ConductanceLaw::Uniform { lo: 0.0, hi: 0.8 },
        ];
        let q = 2.0;
        let v = &moment_condition_check(&laws, &[q]).unwrap()[0];
        assert!(v.pass); // theta_sum = 4 > 2
        let exact = v.value.unwrap();
        let mc = sup_inverse_moment_mc(&laws, q, 400_000, 17).unwrap();
        assert!(
            (mc.estimate - exact).abs() < 0.05 * exact,
            "mc={} exact={exact}",
            mc.estimate
        );
    }

    #[test]
    fn law_means_and_variances_match_sampling() {
        let laws = [
            ConductanceLaw::InverseShiftedExponential { rate: 1.0 },
            ConductanceLaw::PowerLawNearZero { theta: 0.5 },
            ConductanceLaw::Uniform { lo: 0.1, hi: 0.7 },
            bern(0.3, 0.1, 0.9),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for law in &laws {
            let n = 200_000;
            let draws: Vec<f64> = (0..n)
                .map(|_| law.sample_unit(u64_to_unit(rng.next_u64())))
                .collect();
            let mean = pairwise_sum(&draws) / n as f64;
            let sq: Vec<f64> = draws.iter().map(|x| (x - mean) * (x - mean)).collect();
            let var = pairwise_sum(&sq) / n as f64;
            assert!(
                (mean - law.mean()).abs() < 0.01,
                "{law:?}: mean {mean} vs {}",
                law.mean()
            );
            assert!(
                (var - law.variance()).abs() < 0.01,
                "{law:?}: var {var} vs {}",
                law.variance()
            );
        }
        // Closed-form check of the shifted-exponential mean at rate 1.
        let m = ConductanceLaw::InverseShiftedExponential { rate: 1.0 }.mean();
        assert!((m - 0.596_347_362_323_194).abs() < 1e-12);
    }

    #[test]
    fn centered_conductance_under_constant_law_vanishes() {
        let lat = TorusLattice::new(2, 6).unwrap();
        let laws = vec![ConductanceLaw::Constant { value: 0.7 }; 2];
        let env = sample_environment(&laws, &lat, 0).unwrap();
        let obs = LocalObservable::CenteredConductance {
            offset: vec![1, 0],
            direction: 0,
        };
        let g = evaluate_observable(&obs, &env).unwrap();
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn centered_conductance_spatial_mean_is_small() {
        let lat = TorusLattice::new(2, 64).unwrap();
        let laws = vec![bern(0.5, 0.0, 1.0); 2];
        let env = sample_environment(&laws, &lat, 12).unwrap();
        let obs = LocalObservable::CenteredConductance {
            offset: vec![0, 0],
            direction: 1,
        };
        let g = evaluate_observable(&obs, &env).unwrap();
        let mean = g.sum() / g.values().len() as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn centered_conductance_reads_the_shifted_edge() {
        let lat = TorusLattice::new(1, 4).unwrap();
        let env =
            sample_environment(&[ConductanceLaw::Uniform { lo: 0.0, hi: 1.0 }], &lat, 3).unwrap();
        let obs = LocalObservable::CenteredConductance {
            offset: vec![1],
            direction: 0,
        };
        let mean = env.laws()[0].mean();
        let g = evaluate_observable(&obs, &env).unwrap();
        for v in 0..4 {
            assert_eq!(g.values()[v], env.conductance((v + 1) % 4) - mean);
        }
    }

    #[test]
    fn divergence_form_sums_to_zero() {
        let lat = TorusLattice::new(3, 6).unwrap();
        let laws = vec![
            bern(0.5, 0.0, 1.0),
            bern(0.5, 0.0, 1.0),
            ConductanceLaw::InverseShiftedExponential { rate: 1.0 },
        ];
        let env = sample_environment(&laws, &lat, 21).unwrap();
        let obs = LocalObservable::DivergenceForm {
            direction: 0,
            inner: Box::new(LocalObservable::CenteredConductance {
                offset: vec![1, 0, 0],
                direction: 0,
            }),
        };
        assert_eq!(obs.support_size(), 2);
        let g = evaluate_observable(&obs, &env).unwrap();
        assert!(g.sum().abs() <= 1e-12);
    }

    #[test]
    fn observable_support_must_fit() {
        let lat = TorusLattice::new(2, 6).unwrap();
        let env = sample_environment(
            &vec![ConductanceLaw::Uniform { lo: 0.0, hi: 1.0 }; 2],
            &lat,
            0,
        )
        .unwrap();
        let obs = LocalObservable::CenteredConductance {
            offset: vec![3, 0],
            direction: 0,
        };
        assert!(matches!(
            evaluate_observable(&obs, &env),
            Err(Error::SupportExceedsTorus { .. })
        ));
    }

    #[test]
    fn environment_csv_roundtrip() {
        let lat = TorusLattice::new(2, 4).unwrap();
        let laws = vec![
            ConductanceLaw::Uniform { lo: 0.0, hi: 1.0 },
            bern(0.25, 0.1, 0.8),
        ];
        let env = sample_environment(&laws, &lat, 424_242).unwrap();
        let mut buf = Vec::new();
        env.write_csv(&mut buf).unwrap();
        let back = Environment::read_csv(&buf[..]).unwrap();
        assert_eq!(back.conductances().values(), env.conductances().values());
        assert_eq!(back.laws(), env.laws());
        assert_eq!(back.seed(), env.seed());
    }
}
