//! Monte-Carlo relaxation experiments: moment series of the evolved
//! observable, power-law decay fits, and the slow-relaxation counterexample.
//!
//! Expectations are estimated by combining the spatial average over the
//! torus with the ensemble average over replicates; stationarity of the
//! evolved field justifies treating its values at all vertices as samples of
//! the observable seen from the origin. Replicates use independently derived
//! RNG streams and are reduced in replicate order, so results do not depend
//! on thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::environment::{
    evaluate_observable, moment_condition_check, sample_environment, ConductanceLaw,
    LocalObservable, MomentVerdict,
};
use crate::error::{Error, Result};
use crate::heat::{evolve, EvolutionParams};
use crate::lattice::TorusLattice;
use crate::math::{derive_seed, mean_stderr, pairwise_sum};

/// One time point of a moment series.
#[derive(Debug, Clone)]
pub struct MomentEntry {
    pub t: f64,
    /// Ensemble estimate of the raw moment `< |u_t|^(2p) >`.
    pub raw: f64,
    /// The rooted estimate `< |u_t|^(2p) >^(1/p)`.
    pub estimate: f64,
    /// Delta-method standard error of the rooted estimate.
    pub stderr: f64,
}

/// Ensemble metadata carried with every series.
#[derive(Debug, Clone)]
pub struct SeriesMeta {
    pub dim: usize,
    pub side: usize,
    pub reps: usize,
    pub master_seed: u64,
    pub laws: Vec<ConductanceLaw>,
    pub observable: LocalObservable,
    /// Verdict of the moment condition at q = p, recorded per series.
    pub moment_verdict: Option<MomentVerdict>,
}

/// Estimates of `< |u_t|^(2p) >^(1/p)` along the output time grid.
#[derive(Debug, Clone)]
pub struct MomentSeries {
    pub p: u32,
    pub entries: Vec<MomentEntry>,
    pub meta: SeriesMeta,
}

impl MomentSeries {
    /// The rescaled statistic `S(t) = t^(d/2) * estimate(t)` at positive
    /// grid times.
    pub fn scaled(&self) -> Vec<(f64, f64)> {
        let half_d = self.meta.dim as f64 / 2.0;
        self.entries
            .iter()
            .filter(|e| e.t > 0.0)
            .map(|e| (e.t, e.t.powf(half_d) * e.estimate))
            .collect()
    }
}

/// Evolve the observable's stationary extension over an ensemble of
/// environments and estimate `< |u_t|^(2p) >^(1/p)` for every requested p.
#[allow(clippy::too_many_arguments)]
pub fn run_relaxation(
    laws: &[ConductanceLaw],
    observable: &LocalObservable,
    p_list: &[u32],
    params: &EvolutionParams,
    reps: usize,
    seed: u64,
    lattice: &Arc<TorusLattice>,
) -> Result<Vec<MomentSeries>> {
    if reps < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 replicates for a standard error, got {reps}"
        )));
    }
    if p_list.is_empty() || p_list.iter().any(|&p| p < 1) {
        return Err(Error::InvalidArgument(
            "moment orders must be integers >= 1".into(),
        ));
    }
    observable.validate(lattice.dim())?;
    let q_list: Vec<f64> = p_list.iter().map(|&p| p as f64).collect();
    let verdicts = moment_condition_check(laws, &q_list)?;

    let n_times = params.steps().len();
    let n_p = p_list.len();
    // Per replicate: spatial means of |u_t|^(2p), laid out [time][p].
    let per_rep: Vec<Result<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let env = sample_environment(laws, lattice, derive_seed(seed, rep as u64))?;
            let g = evaluate_observable(observable, &env)?;
            let snapshots = evolve(&env, &g, params)?;
            let mut out = Vec::with_capacity(n_times * n_p);
            for field in &snapshots {
                for &p in p_list {
                    let powers: Vec<f64> = field
                        .values()
                        .iter()
                        .map(|x| x.abs().powi(2 * p as i32))
                        .collect();
                    out.push(pairwise_sum(&powers) / powers.len() as f64);
                }
            }
            Ok(out)
        })
        .collect();
    let per_rep: Vec<Vec<f64>> = per_rep.into_iter().collect::<Result<_>>()?;

    let times = params.times();
    let mut series = Vec::with_capacity(n_p);
    for (pi, &p) in p_list.iter().enumerate() {
        let mut entries = Vec::with_capacity(n_times);
        for (ti, &t) in times.iter().enumerate() {
            let col: Vec<f64> = per_rep.iter().map(|r| r[ti * n_p + pi]).collect();
            let (raw, raw_stderr) = mean_stderr(&col);
            let inv_p = 1.0 / p as f64;
            let estimate = raw.powf(inv_p);
            let stderr = if raw > 0.0 {
                raw_stderr * inv_p * raw.powf(inv_p - 1.0)
            } else {
                0.0
            };
            entries.push(MomentEntry {
                t,
                raw,
                estimate,
                stderr,
            });
        }
        series.push(MomentSeries {
            p,
            entries,
            meta: SeriesMeta {
                dim: lattice.dim(),
                side: lattice.side(),
                reps,
                master_seed: seed,
                laws: laws.to_vec(),
                observable: observable.clone(),
                moment_verdict: verdicts.get(pi).cloned(),
            },
        });
    }
    Ok(series)
}

/// A least-squares power-law fit of a series on a log-log scale.
#[derive(Debug, Clone)]
pub struct DecayFit {
    /// Positive decay rate: estimate ~ t^(-exponent).
    pub exponent: f64,
    pub stderr: f64,
    pub window: (f64, f64),
    pub r2: f64,
}

/// Ordinary least squares of log(value) on log(t) over `points` already
/// restricted to a window.
pub fn fit_log_log(points: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit> {
    if points.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 points in the fit window, got {}",
            points.len()
        )));
    }
    if let Some((t, v)) = points.iter().find(|(t, v)| !(*t > 0.0) || !(*v > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "fit window contains a nonpositive point (t = {t}, value = {v})"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    let n = xs.len() as f64;
    let x_mean = pairwise_sum(&xs) / n;
    let y_mean = pairwise_sum(&ys) / n;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean) * (x - x_mean)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let sst: f64 = ys.iter().map(|y| (y - y_mean) * (y - y_mean)).sum();
    let r2 = if sst > 0.0 {
        1.0 - ssr / sst
    } else if ssr <= f64::EPSILON {
        1.0
    } else {
        0.0
    };
    let stderr = if points.len() > 2 {
        (ssr / ((n - 2.0) * sxx)).sqrt()
    } else {
        0.0
    };
    Ok(DecayFit {
        exponent: -slope,
        stderr,
        window,
        r2,
    })
}

/// Fit the decay exponent of a moment series over `window = (t_lo, t_hi)`.
pub fn fit_decay(series: &MomentSeries, window: (f64, f64)) -> Result<DecayFit> {
    let points: Vec<(f64, f64)> = series
        .entries
        .iter()
        .filter(|e| e.t >= window.0 && e.t <= window.1)
        .map(|e| (e.t, e.estimate))
        .collect();
    fit_log_log(&points, window)
}

/// True when the raw moment series never increases along the grid (up to a
/// relative rounding slack), the finite-volume dissipation statement.
pub fn dissipation_check(series: &MomentSeries) -> bool {
    series
        .entries
        .windows(2)
        .all(|w| w[1].raw <= w[0].raw * (1.0 + 1e-12) + f64::MIN_POSITIVE)
}

/// Configuration of the slow-relaxation experiment: power-law-near-zero
/// conductances in every direction, observed through a centered conductance
/// away from the origin.
#[derive(Debug, Clone)]
pub struct NecessityConfig {
    pub theta: Vec<f64>,
    pub q: u32,
    pub side: usize,
    pub observable: LocalObservable,
}

impl NecessityConfig {
    /// Small-ball exponent of the direction supremum:
    /// `P(sup_i a(e_i) <= eps) = eps^(sum theta_i)`.
    pub fn p0(&self) -> f64 {
        self.theta.iter().sum()
    }

    pub fn laws(&self) -> Vec<ConductanceLaw> {
        self.theta
            .iter()
            .map(|&theta| ConductanceLaw::PowerLawNearZero { theta })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.q < 1 {
            return Err(Error::InvalidArgument("q must be >= 1".into()));
        }
        for law in self.laws() {
            law.validate()?;
        }
        // The observed edge must avoid the origin so that it is independent
        // of the conductances incident there.
        match &self.observable {
            LocalObservable::CenteredConductance { offset, direction } => {
                let touches_origin = offset.iter().all(|&c| c == 0) || {
                    let mut over = offset.clone();
                    if let Some(c) = over.get_mut(*direction) {
                        *c += 1;
                    }
                    over.iter().all(|&c| c == 0)
                };
                if touches_origin {
                    return Err(Error::InvalidArgument(
                        "necessity observable must read an edge not containing the origin".into(),
                    ));
                }
                Ok(())
            }
            _ => Err(Error::InvalidArgument(
                "necessity experiment observes a centered conductance".into(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NecessityRow {
    pub t: f64,
    /// `S(q, t) = t^(d/2) < |u_t|^(2q) >^(1/q)`.
    pub s_value: f64,
    pub raw: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone)]
pub struct NecessityTable {
    pub q: u32,
    pub p0: f64,
    pub rows: Vec<NecessityRow>,
    /// `S(q, t_max) / S(q, t_min)` over the positive-time ladder.
    pub growth_ratio: f64,
    /// Set when the ratio reaches 2.
    pub growth_witnessed: bool,
    /// `max S / min S`, the band width diagnostic used for control runs.
    pub band_ratio: f64,
}

/// Run the slow-relaxation experiment: evolve the centered conductance under
/// the power-law environment and rescale the moment series by `t^(d/2)`.
/// Diffusive relaxation keeps `S(q, t)` bounded; the moment-condition
/// failure shows up as growth.
pub fn necessity_experiment(
    cfg: &NecessityConfig,
    params: &EvolutionParams,
    reps: usize,
    seed: u64,
) -> Result<NecessityTable> {
    cfg.validate()?;
    let lattice = TorusLattice::new(cfg.theta.len(), cfg.side)?;
    let series = run_relaxation(
        &cfg.laws(),
        &cfg.observable,
        &[cfg.q],
        params,
        reps,
        seed,
        &lattice,
    )?;
    let series = &series[0];
    let scaled = series.scaled();
    if scaled.is_empty() {
        return Err(Error::InvalidArgument(
            "necessity time ladder has no positive times".into(),
        ));
    }
    let rows: Vec<NecessityRow> = series
        .entries
        .iter()
        .filter(|e| e.t > 0.0)
        .zip(&scaled)
        .map(|(e, &(_, s))| NecessityRow {
            t: e.t,
            s_value: s,
            raw: e.raw,
            stderr: e.stderr,
        })
        .collect();
    let first = rows.first().expect("nonempty").s_value;
    let last = rows.last().expect("nonempty").s_value;
    let growth_ratio = if first > 0.0 {
        last / first
    } else {
        f64::INFINITY
    };
    let s_max = rows
        .iter()
        .map(|r| r.s_value)
        .fold(f64::NEG_INFINITY, f64::max);
    let s_min = rows.iter().map(|r| r.s_value).fold(f64::INFINITY, f64::min);
    let band_ratio = if s_min > 0.0 {
        s_max / s_min
    } else {
        f64::INFINITY
    };
    Ok(NecessityTable {
        q: cfg.q,
        p0: cfg.p0(),
        rows,
        growth_ratio,
        growth_witnessed: growth_ratio >= 2.0,
        band_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heat::default_dt;

    fn centered(offset: Vec<i64>, direction: usize) -> LocalObservable {
        LocalObservable::CenteredConductance { offset, direction }
    }

    fn quick_params(dim: usize, times: &[f64]) -> EvolutionParams {
        EvolutionParams::new(default_dt(dim), times, dim).unwrap()
    }

    #[test]
    fn constant_law_series_is_identically_zero() {
        let lat = TorusLattice::new(2, 8).unwrap();
        let laws = vec![ConductanceLaw::Constant { value: 0.6 }; 2];
        let series = run_relaxation(
            &laws,
            &centered(vec![1, 0], 0),
            &[1, 2],
            &quick_params(2, &[0.0, 1.0, 2.0]),
            3,
            0,
            &lat,
        )
        .unwrap();
        for s in &series {
            for e in &s.entries {
                assert_eq!(e.raw, 0.0);
                assert_eq!(e.estimate, 0.0);
                assert_eq!(e.stderr, 0.0);
            }
            assert!(dissipation_check(s));
        }
    }

    #[test]
    fn initial_variance_matches_the_law() {
        let lat = TorusLattice::new(2, 32).unwrap();
        let laws = vec![
            ConductanceLaw::Bernoulli {
                p: 0.5,
                lo: 0.0,
                hi: 1.0,
            };
            2
        ];
        let series = run_relaxation(
            &laws,
            &centered(vec![1, 0], 0),
            &[1],
            &quick_params(2, &[0.0, 1.0]),
            64,
            7,
            &lat,
        )
        .unwrap();
        let e0 = &series[0].entries[0];
        // Var(a) = 1/4 for the fair Bernoulli on {0, 1}.
        assert!(
            (e0.estimate - 0.25).abs() <= 3.0 * e0.stderr.max(1e-4),
            "estimate {} stderr {}",
            e0.estimate,
            e0.stderr
        );
    }

    #[test]
    fn series_raw_moments_never_increase() {
        let lat = TorusLattice::new(2, 12).unwrap();
        let laws = vec![
            ConductanceLaw::Uniform { lo: 0.0, hi: 1.0 },
            ConductanceLaw::Bernoulli {
                p: 0.7,
                lo: 0.1,
                hi: 1.0,
            },
        ];
        let series = run_relaxation(
            &laws,
            &centered(vec![1, 0], 1),
            &[1, 2, 3],
            &quick_params(2, &[0.0, 0.5, 1.0, 2.0, 4.0, 8.0]),
            8,
            3,
            &lat,
        )
        .unwrap();
        for s in &series {
            assert!(dissipation_check(s), "p = {} series grew", s.p);
            for w in s.entries.windows(2) {
                assert!(w[1].estimate <= w[0].estimate * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn dissipation_check_rejects_injected_growth() {
        let lat = TorusLattice::new(2, 8).unwrap();
        let laws = vec![ConductanceLaw::Constant { value: 1.0 }; 2];
        let mut series = run_relaxation(
            &laws,
            &centered(vec![1, 0], 0),
            &[1],
            &quick_params(2, &[0.0, 1.0, 2.0]),
            2,
            0,
            &lat,
        )
        .unwrap();
        let s = &mut series[0];
        s.entries[1].raw = 0.5;
        s.entries[2].raw = 1.0;
        assert!(!dissipation_check(s));
    }

    #[test]
    fn rejects_undersized_ensembles_and_bad_orders() {
        let lat = TorusLattice::new(2, 8).unwrap();
        let laws = vec![ConductanceLaw::Constant { value: 1.0 }; 2];
        let params = quick_params(2, &[0.0, 1.0]);
        let obs = centered(vec![1, 0], 0);
        assert!(run_relaxation(&laws, &obs, &[1], &params, 1, 0, &lat).is_err());
        assert!(run_relaxation(&laws, &obs, &[0], &params, 4, 0, &lat).is_err());
        assert!(run_relaxation(&laws, &obs, &[], &params, 4, 0, &lat).is_err());
    }

    #[test]
    fn synthetic_power_laws_fit_exactly() {
        let ts = [2.0f64, 4.0, 8.0, 16.0, 32.0];
        let pts: Vec<(f64, f64)> = ts.iter().map(|&t| (t, t.powf(-1.5))).collect();
        let fit = fit_log_log(&pts, (2.0, 32.0)).unwrap();
        assert!((fit.exponent - 1.5).abs() < 1e-12);
        assert!(fit.r2 > 0.999_999);
        assert!(fit.stderr < 1e-12);

        let pts: Vec<(f64, f64)> = ts.iter().map(|&t| (t, 3.0 / t)).collect();
        let fit = fit_log_log(&pts, (2.0, 32.0)).unwrap();
        assert!((fit.exponent - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_thin_or_nonpositive_windows() {
        let pts = [(1.0, 1.0), (2.0, 0.5), (3.0, 0.25)];
        assert!(fit_log_log(&pts, (1.0, 3.0)).is_err());
        let pts = [(1.0, 1.0), (2.0, 0.5), (3.0, 0.25), (4.0, 0.0)];
        assert!(fit_log_log(&pts, (1.0, 4.0)).is_err());
    }

    #[test]
    fn estimator_stderr_shrinks_like_root_reps() {
        let lat = TorusLattice::new(2, 12).unwrap();
        let laws = vec![
            ConductanceLaw::Bernoulli {
                p: 0.5,
                lo: 0.0,
                hi: 1.0,
            };
            2
        ];
        let params = quick_params(2, &[2.0]);
        let obs = centered(vec![1, 0], 0);
        let small = run_relaxation(&laws, &obs, &[1], &params, 100, 40, &lat).unwrap();
        let large = run_relaxation(&laws, &obs, &[1], &params, 200, 40, &lat).unwrap();
        let ratio = small[0].entries[0].stderr / large[0].entries[0].stderr;
        let root2 = std::f64::consts::SQRT_2;
        assert!(
            (ratio / root2 - 1.0).abs() <= 0.2,
            "stderr ratio {ratio}, expected about {root2}"
        );
    }

    #[test]
    fn relaxation_is_deterministic() {
        let lat = TorusLattice::new(2, 10).unwrap();
        let laws = vec![ConductanceLaw::Uniform { lo: 0.0, hi: 1.0 }; 2];
        let params = quick_params(2, &[0.0, 1.0, 4.0]);
        let obs = centered(vec![1, 0], 0);
        let a = run_relaxation(&laws, &obs, &[1, 2], &params, 16, 5, &lat).unwrap();
        let b = run_relaxation(&laws, &obs, &[1, 2], &params, 16, 5, &lat).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            for (ea, eb) in sa.entries.iter().zip(&sb.entries) {
                assert_eq!(ea.raw, eb.raw);
                assert_eq!(ea.estimate, eb.estimate);
                assert_eq!(ea.stderr, eb.stderr);
            }
        }
        // The verdict for p = 1 is recorded in the metadata.
        assert!(a[0].meta.moment_verdict.as_ref().unwrap().pass);
    }

    #[test]
    fn necessity_config_validation_and_shape() {
        let good = NecessityConfig {
            theta: vec![0.5, 0.5],
            q: 4,
            side: 8,
            observable: centered(vec![1, 0], 0),
        };
        let params = quick_params(2, &[0.0, 1.0, 2.0, 4.0]);
        let table = necessity_experiment(&good, &params, 8, 3).unwrap();
        assert_eq!(table.q, 4);
        assert!((table.p0 - 1.0).abs() < 1e-15);
        assert_eq!(table.rows.len(), 3); // t = 0 dropped
        assert!(table.rows.iter().all(|r| r.s_value >= 0.0));
        let want = table.rows.last().unwrap().s_value / table.rows[0].s_value;
        assert_eq!(table.growth_ratio, want);
        assert_eq!(table.growth_witnessed, want >= 2.0);

        // The observed edge may not contain the origin.
        let bad = NecessityConfig {
            theta: vec![0.5, 0.5],
            q: 4,
            side: 8,
            observable: centered(vec![0, 0], 0),
        };
        assert!(necessity_experiment(&bad, &params, 8, 3).is_err());
        let bad = NecessityConfig {
            theta: vec![0.5, 0.5],
            q: 4,
            side: 8,
            observable: centered(vec![-1, 0], 0),
        };
        assert!(necessity_experiment(&bad, &params, 8, 3).is_err());
    }
}
