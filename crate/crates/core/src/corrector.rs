//! Massive corrector solves.
//!
//! For a direction i and mass mu > 0, the corrector solves
//! `(mu I + div a grad) phi = rhs` with `rhs` the negative divergence of the
//! unit flux `a e_i`, so that `a (grad phi + e_i)` is divergence-free in the
//! mu -> 0 limit. The operator is symmetric positive definite for every
//! mu > 0, including environments with zero conductances, and is solved by
//! conjugate gradients without a preconditioner by default (the condition
//! number is governed by mu); diagonal preconditioning is available for very
//! small masses.

use std::sync::Arc;

use rayon::prelude::*;

use crate::environment::{sample_environment, ConductanceLaw, Environment};
use crate::error::{Error, Result};
use crate::lattice::{ScalarField, TorusLattice};
use crate::math::{derive_seed, mean_stderr, pairwise_sum};

/// Right-hand side of the corrector equation: at each vertex the negative
/// divergence of the direction-i unit flux,
/// `rhs(x) = a((x, x+e_i)) - a((x-e_i, x))`. Sums to zero exactly.
pub fn assemble_rhs(env: &Environment, direction: usize) -> ScalarField {
    let lat = env.lattice();
    let d = lat.dim();
    assert!(direction < d, "direction {direction} out of range");
    let a = env.conductances().values();
    let mut out = ScalarField::zeros(lat);
    {
        let values = out.values_mut();
        for v in 0..lat.vertex_count() {
            let w = lat.down(v, direction);
            values[v] = a[v * d + direction] - a[w * d + direction];
        }
    }
    out
}

/// Solver controls. `tol` is the relative l2 residual target.
#[derive(Debug, Clone)]
pub struct CorrectorOptions {
    pub tol: f64,
    pub jacobi_preconditioner: bool,
    /// Overrides the default cap of `10 * vertex_count` iterations.
    pub max_iterations: Option<usize>,
}

impl Default for CorrectorOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            jacobi_preconditioner: false,
            max_iterations: None,
        }
    }
}

/// A converged corrector solve.
#[derive(Debug, Clone)]
pub struct CorrectorSolution {
    pub direction: usize,
    pub mu: f64,
    pub phi: ScalarField,
    /// Relative l2 norm of the true residual at exit.
    pub residual_rel: f64,
    /// Sup norm of the true residual at exit.
    pub residual_sup: f64,
    pub iterations: usize,
}

impl CorrectorSolution {
    /// Gap in the energy identity
    /// `mu ||phi||^2 + <grad phi, a grad phi> = <phi, rhs>`, relative to the
    /// right-hand side's magnitude.
    pub fn energy_identity_gap(&self, env: &Environment) -> f64 {
        let rhs = assemble_rhs(env, self.direction);
        let grad = crate::lattice::gradient(&self.phi);
        let a = env.conductances().values();
        let dirichlet: Vec<f64> = grad
            .values()
            .iter()
            .zip(a)
            .map(|(g, c)| c * g * g)
            .collect();
        let lhs = self.mu * self.phi.dot(&self.phi) + pairwise_sum(&dirichlet);
        let rhs_pairing = self.phi.dot(&rhs);
        (lhs - rhs_pairing).abs() / rhs_pairing.abs().max(f64::MIN_POSITIVE)
    }
}

/// `dst = (mu I + div a grad) src`.
fn apply_operator(lat: &TorusLattice, a: &[f64], mu: f64, src: &[f64], dst: &mut [f64]) {
    let d = lat.dim();
    let n = lat.vertex_count();
    for (o, s) in dst.iter_mut().zip(src) {
        *o = mu * s;
    }
    for i in 0..d {
        let up = lat.up_table(i);
        let down = lat.down_table(i);
        for v in 0..n {
            let sv = src[v];
            let u = up[v] as usize;
            let w = down[v] as usize;
            dst[v] += a[v * d + i] * (sv - src[u]) + a[w * d + i] * (sv - src[w]);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate-gradient solve of `(mu I + div a grad) phi = assemble_rhs`,
/// deterministic given its inputs.
pub fn solve_massive_corrector(
    env: &Environment,
    direction: usize,
    mu: f64,
    opts: &CorrectorOptions,
) -> Result<CorrectorSolution> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mass must be positive, got {mu}"
        )));
    }
    let lat = env.lattice();
    if direction >= lat.dim() {
        return Err(Error::InvalidArgument(format!(
            "direction {direction} out of range for d = {}",
            lat.dim()
        )));
    }
    let n = lat.vertex_count();
    let a = env.conductances().values();
    let rhs_field = assemble_rhs(env, direction);
    let b = rhs_field.values();
    let b_norm = dot(b, b).sqrt();

    let finish = |x: Vec<f64>, iterations: usize| -> Result<CorrectorSolution> {
        let mut r = vec![0.0; n];
        apply_operator(lat, a, mu, &x, &mut r);
        for (ri, bi) in r.iter_mut().zip(b) {
            *ri = bi - *ri;
        }
        let rel = if b_norm > 0.0 {
            dot(&r, &r).sqrt() / b_norm
        } else {
            0.0
        };
        let sup = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(CorrectorSolution {
            direction,
            mu,
            phi: ScalarField::from_values(lat, x)?,
            residual_rel: rel,
            residual_sup: sup,
            iterations,
        })
    };

    if b_norm == 0.0 {
        return finish(vec![0.0; n], 0);
    }

    let diag: Option<Vec<f64>> = opts.jacobi_preconditioner.then(|| {
        let d = lat.dim();
        (0..n)
            .map(|v| {
                let mut s = mu;
                for i in 0..d {
                    s += a[v * d + i] + a[lat.down(v, i) * d + i];
                }
                s
            })
            .collect()
    });
    let precond = |r: &[f64], z: &mut [f64]| match &diag {
        Some(diag) => {
            for ((zi, ri), di) in z.iter_mut().zip(r).zip(diag) {
                *zi = ri / di;
            }
        }
        None => z.copy_from_slice(r),
    };

    let cap = opts.max_iterations.unwrap_or(10 * n);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    while iterations < cap {
        if dot(&r, &r).sqrt() <= opts.tol * b_norm {
            return finish(x, iterations);
        }
        apply_operator(lat, a, mu, &p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for ((xi, ri), (pi, api)) in x.iter_mut().zip(&mut r).zip(p.iter().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
        iterations += 1;
    }
    if dot(&r, &r).sqrt() <= opts.tol * b_norm {
        return finish(x, iterations);
    }
    Err(Error::NonConverged {
        iterations,
        residual: dot(&r, &r).sqrt() / b_norm,
    })
}

/// One row of the mass sweep: the spatial-plus-ensemble estimate of
/// `< |phi_mu|^p >` with its standard error over replicates.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub mu: f64,
    pub p: u32,
    pub moment: f64,
    pub stderr: f64,
    pub reps_used: usize,
    pub nonconverged: usize,
}

/// Estimate `< |phi_{e,mu}|^p >` over independent environments for each
/// (mu, p) pair. Stationarity justifies treating the corrector values at all
/// vertices as samples of the corrector at the origin.
#[allow(clippy::too_many_arguments)]
pub fn corrector_moment_sweep(
    laws: &[ConductanceLaw],
    lattice: &Arc<TorusLattice>,
    direction: usize,
    mu_list: &[f64],
    p_list: &[u32],
    reps: usize,
    seed: u64,
    opts: &CorrectorOptions,
) -> Result<Vec<SweepRow>> {
    if mu_list.is_empty() || mu_list.windows(2).any(|w| w[1] >= w[0]) || mu_list[0] <= 0.0 {
        return Err(Error::InvalidArgument(
            "mass list must be positive and strictly decreasing".into(),
        ));
    }
    if mu_list.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::InvalidArgument("masses must be positive".into()));
    }
    if p_list.is_empty() || p_list.iter().any(|&p| p < 1) {
        return Err(Error::InvalidArgument(
            "moment orders must be integers >= 1".into(),
        ));
    }
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be positive".into()));
    }

    // Per replicate, the spatial mean of |phi|^p for every (mu, p).
    let per_rep: Vec<Option<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let env = sample_environment(laws, lattice, derive_seed(seed, rep as u64)).ok()?;
            let mut row = Vec::with_capacity(mu_list.len() * p_list.len());
            for &mu in mu_list {
                let sol = solve_massive_corrector(&env, direction, mu, opts).ok()?;
                for &p in p_list {
                    let powers: Vec<f64> = sol
                        .phi
                        .values()
                        .iter()
                        .map(|x| x.abs().powi(p as i32))
                        .collect();
                    row.push(pairwise_sum(&powers) / powers.len() as f64);
                }
            }
            Some(row)
        })
        .collect();

    let nonconverged = per_rep.iter().filter(|r| r.is_none()).count();
    let used: Vec<&Vec<f64>> = per_rep.iter().flatten().collect();
    let mut rows = Vec::with_capacity(mu_list.len() * p_list.len());
    for (mi, &mu) in mu_list.iter().enumerate() {
        for (pi, &p) in p_list.iter().enumerate() {
            let col: Vec<f64> = used.iter().map(|r| r[mi * p_list.len() + pi]).collect();
            let (mean, stderr) = mean_stderr(&col);
            rows.push(SweepRow {
                mu,
                p,
                moment: mean,
                stderr,
                reps_used: col.len(),
                nonconverged,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{gradient, TorusLattice};

    fn uniform_env(d: usize, side: usize, lo: f64, hi: f64, seed: u64) -> Environment {
        let lat = TorusLattice::new(d, side).unwrap();
        sample_environment(&vec![ConductanceLaw::Uniform { lo, hi }; d], &lat, seed).unwrap()
    }

    #[test]
    fn rhs_hand_example_and_conservation() {
        let lat = TorusLattice::new(1, 4).unwrap();
        let env = Environment::from_conductances(
            &lat,
            vec![ConductanceLaw::Uniform { lo: 0.0, hi: 1.0 }],
            vec![1.0, 0.5, 1.0, 1.0],
            0,
        )
        .unwrap();
        let rhs = assemble_rhs(&env, 0);
        assert_eq!(rhs.values(), &[0.0, -0.5, 0.5, 0.0]);

        for seed in 0..10 {
            let env = uniform_env(3, 4, 0.0, 1.0, seed);
            for dir in 0..3 {
                assert!(assemble_rhs(&env, dir).sum().abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn constant_environment_has_zero_corrector() {
        let lat = TorusLattice::new(2, 6).unwrap();
        let env =
            sample_environment(&vec![ConductanceLaw::Constant { value: 0.8 }; 2], &lat, 0).unwrap();
        let sol = solve_massive_corrector(&env, 0, 0.01, &CorrectorOptions::default()).unwrap();
        assert!(sol.phi.values().iter().all(|&x| x == 0.0));
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn huge_mass_gives_the_leading_neumann_term() {
        let env = uniform_env(2, 8, 0.1, 1.0, 3);
        let mu = 1e6;
        let sol = solve_massive_corrector(&env, 1, mu, &CorrectorOptions::default()).unwrap();
        let rhs = assemble_rhs(&env, 1);
        let rhs_max = rhs.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dev = sol
            .phi
            .values()
            .iter()
            .zip(rhs.values())
            .map(|(p, r)| (p - r / mu).abs())
            .fold(0.0f64, f64::max);
        assert!(dev <= 1e-5 * rhs_max, "deviation {dev}");
    }

    #[test]
    fn matches_dense_solve_on_small_lattice() {
        use nalgebra::{DMatrix, DVector};
        let env = uniform_env(2, 4, 0.05, 1.0, 11);
        let lat = env.lattice();
        let n = lat.vertex_count();
        let mu = 0.37;
        let mut m = DMatrix::<f64>::from_diagonal_element(n, n, mu);
        for v in 0..n {
            for i in 0..lat.dim() {
                let u = lat.up(v, i);
                let c = env.conductance(lat.edge_index(v, i));
                m[(v, v)] += c;
                m[(u, u)] += c;
                m[(v, u)] -= c;
                m[(u, v)] -= c;
            }
        }
        let rhs = assemble_rhs(&env, 0);
        let b = DVector::from_column_slice(rhs.values());
        let dense = m.lu().solve(&b).unwrap();
        let sol = solve_massive_corrector(&env, 0, mu, &CorrectorOptions::default()).unwrap();
        let dev = sol
            .phi
            .values()
            .iter()
            .enumerate()
            .map(|(i, p)| (p - dense[i]).abs())
            .fold(0.0f64, f64::max);
        assert!(dev <= 1e-8, "deviation from dense solve {dev}");
    }

    #[test]
    fn energy_identity_and_residuals() {
        for seed in 0..5 {
            let env = uniform_env(2, 8, 0.0, 1.0, 100 + seed);
            let sol = solve_massive_corrector(&env, 0, 0.05, &CorrectorOptions::default()).unwrap();
            assert!(sol.residual_rel <= 1e-10);
            assert!(sol.energy_identity_gap(&env) <= 1e-8);
            assert!(sol.phi.sum().abs() <= 1e-8, "mean {}", sol.phi.sum());
        }
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let env = uniform_env(2, 8, 0.1, 1.0, 5);
        let opts = CorrectorOptions {
            max_iterations: Some(1),
            ..CorrectorOptions::default()
        };
        assert!(matches!(
            solve_massive_corrector(&env, 0, 1e-4, &opts),
            Err(Error::NonConverged { .. })
        ));
    }

    #[test]
    fn jacobi_preconditioner_agrees_with_plain_cg() {
        let env = uniform_env(2, 6, 0.2, 1.0, 8);
        let plain = solve_massive_corrector(&env, 0, 1e-4, &CorrectorOptions::default()).unwrap();
        let pre = solve_massive_corrector(
            &env,
            0,
            1e-4,
            &CorrectorOptions {
                jacobi_preconditioner: true,
                ..CorrectorOptions::default()
            },
        )
        .unwrap();
        let dev = plain
            .phi
            .values()
            .iter()
            .zip(pre.phi.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let scale = plain
            .phi
            .values()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(dev <= 1e-7 * scale.max(1.0), "solver disagreement {dev}");
    }

    #[test]
    fn one_dimensional_flux_is_conserved_and_harmonic() {
        let env = uniform_env(1, 32, 0.5, 1.0, 21);
        let lat = env.lattice();
        let mu = 1e-6;
        let sol = solve_massive_corrector(&env, 0, mu, &CorrectorOptions::default()).unwrap();
        let grad = gradient(&sol.phi);
        let a = env.conductances().values();

        // Current conservation: a (grad phi + 1) constant across edges.
        let flux: Vec<f64> = grad
            .values()
            .iter()
            .zip(a)
            .map(|(g, c)| c * (g + 1.0))
            .collect();
        let spread = flux.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            - flux.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        assert!(spread <= 1e-5, "flux spread {spread}");

        // Closed form: grad phi = c / a - 1 with c the harmonic mean.
        let inv_sum: f64 = a.iter().map(|c| 1.0 / c).sum();
        let hm = lat.edge_count() as f64 / inv_sum;
        let expected_max = a
            .iter()
            .map(|c| (hm / c - 1.0).abs())
            .fold(0.0f64, f64::max);
        let dev = grad
            .values()
            .iter()
            .zip(a)
            .map(|(g, c)| (g - (hm / c - 1.0)).abs())
            .fold(0.0f64, f64::max);
        assert!(
            dev <= 0.02 * expected_max,
            "gradient deviates from harmonic form by {dev} (scale {expected_max})"
        );
    }

    #[test]
    fn sweep_on_constant_law_is_identically_zero() {
        let lat = TorusLattice::new(2, 5).unwrap();
        let laws = vec![ConductanceLaw::Constant { value: 0.9 }; 2];
        let rows = corrector_moment_sweep(
            &laws,
            &lat,
            0,
            &[0.1, 0.01],
            &[1, 2],
            4,
            0,
            &CorrectorOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        for row in rows {
            assert_eq!(row.moment, 0.0);
            assert_eq!(row.nonconverged, 0);
            assert_eq!(row.reps_used, 4);
        }
    }

    #[test]
    fn sweep_validates_mass_ladder() {
        let lat = TorusLattice::new(2, 5).unwrap();
        let laws = vec![ConductanceLaw::Constant { value: 0.9 }; 2];
        let opts = CorrectorOptions::default();
        assert!(corrector_moment_sweep(&laws, &lat, 0, &[0.01, 0.1], &[1], 2, 0, &opts).is_err());
        assert!(corrector_moment_sweep(&laws, &lat, 0, &[0.1], &[0], 2, 0, &opts).is_err());
        assert!(corrector_moment_sweep(&laws, &lat, 0, &[], &[1], 2, 0, &opts).is_err());
    }
}
