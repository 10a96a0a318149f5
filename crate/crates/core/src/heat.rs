//! Explicit-Euler time evolution of the divergence-form heat equation,
//! heat-kernel columns, and on-diagonal decay diagnostics.
//!
//! The scheme is forward Euler with `dt <= 1/(2d)`: with conductances in
//! [0, 1] every update is a convex combination of neighbor values, so mass,
//! positivity, and the maximum principle are preserved exactly, and the
//! discrete semigroup composes exactly on the step grid. Output times are
//! snapped to the grid rather than interpolated.

use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::lattice::{ScalarField, TorusLattice};

/// Time step and snapped output grid for one evolution run.
#[derive(Debug, Clone)]
pub struct EvolutionParams {
    dt: f64,
    steps: Vec<u64>,
}

/// Default step size 1/(4d), strictly inside the stability region.
pub fn default_dt(dim: usize) -> f64 {
    1.0 / (4.0 * dim as f64)
}

/// Largest stable step size 1/(2d) for conductances bounded by 1.
pub fn stability_bound(dim: usize) -> f64 {
    1.0 / (2.0 * dim as f64)
}

impl EvolutionParams {
    /// Snap the requested output times to multiples of `dt` and validate the
    /// stability bound for dimension `dim`.
    pub fn new(dt: f64, times: &[f64], dim: usize) -> Result<Self> {
        let bound = stability_bound(dim);
        if !(dt > 0.0) || dt > bound {
            return Err(Error::UnstableTimeStep { dt, bound });
        }
        if times.is_empty() {
            return Err(Error::InvalidArgument("empty output time grid".into()));
        }
        let mut steps = Vec::with_capacity(times.len());
        for &t in times {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(Error::InvalidArgument(format!("bad output time {t}")));
            }
            steps.push((t / dt).round() as u64);
        }
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "output times must be strictly increasing after snapping to the dt grid".into(),
            ));
        }
        Ok(Self { dt, steps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    /// Output times after snapping.
    pub fn times(&self) -> Vec<f64> {
        self.steps.iter().map(|&n| n as f64 * self.dt).collect()
    }
}

/// One forward-Euler update `f - dt * divergence(a * gradient(f))`, written
/// in Laplacian form so that constants are exact fixed points.
fn step_into(lat: &TorusLattice, a: &[f64], dt: f64, src: &[f64], dst: &mut [f64]) {
    let d = lat.dim();
    let n = lat.vertex_count();
    dst.copy_from_slice(src);
    for i in 0..d {
        let up = lat.up_table(i);
        let down = lat.down_table(i);
        for v in 0..n {
            let fv = src[v];
            let u = up[v] as usize;
            let w = down[v] as usize;
            dst[v] += dt * (a[v * d + i] * (src[u] - fv) + a[w * d + i] * (src[w] - fv));
        }
    }
}

fn check_step(env: &Environment, f: &ScalarField, dt: f64) -> Result<()> {
    let lat = f.lattice();
    if !lat.same_shape(env.lattice()) {
        return Err(Error::LatticeMismatch);
    }
    let bound = stability_bound(lat.dim());
    if !(dt > 0.0) || dt > bound {
        return Err(Error::UnstableTimeStep { dt, bound });
    }
    Ok(())
}

/// Single Euler step. Conserves the total mass and keeps values inside
/// `[min f, max f]`.
pub fn euler_step(env: &Environment, f: &ScalarField, dt: f64) -> Result<ScalarField> {
    check_step(env, f, dt)?;
    let lat = f.lattice();
    let mut out = ScalarField::zeros(lat);
    step_into(
        lat,
        env.conductances().values(),
        dt,
        f.values(),
        out.values_mut(),
    );
    Ok(out)
}

/// March `n_steps` Euler steps and return the final field.
pub(crate) fn evolve_steps(
    env: &Environment,
    f0: &ScalarField,
    dt: f64,
    n_steps: u64,
) -> ScalarField {
    let lat = f0.lattice();
    let a = env.conductances().values();
    let mut cur = f0.clone();
    let mut next = ScalarField::zeros(lat);
    for _ in 0..n_steps {
        step_into(lat, a, dt, cur.values(), next.values_mut());
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Evolve `f0` and snapshot the solution at each grid time of `params`.
pub fn evolve(
    env: &Environment,
    f0: &ScalarField,
    params: &EvolutionParams,
) -> Result<Vec<ScalarField>> {
    check_step(env, f0, params.dt)?;
    let lat = f0.lattice();
    let a = env.conductances().values();
    let mut snapshots = Vec::with_capacity(params.steps.len());
    let mut cur = f0.clone();
    let mut next = ScalarField::zeros(lat);
    let mut want = params.steps.iter().peekable();
    let max_step = *params.steps.last().expect("non-empty grid");
    for k in 0..=max_step {
        if want.peek() == Some(&&k) {
            snapshots.push(cur.clone());
            want.next();
        }
        if k < max_step {
            step_into(lat, a, params.dt, cur.values(), next.values_mut());
            std::mem::swap(&mut cur, &mut next);
        }
    }
    Ok(snapshots)
}

/// Heat-kernel column p_t(., y): the evolution started from the indicator
/// of the source vertex.
#[derive(Debug, Clone)]
pub struct KernelColumn {
    pub source: usize,
    pub time: f64,
    pub values: ScalarField,
}

impl KernelColumn {
    /// Total mass; 1 up to rounding for every grid time.
    pub fn mass(&self) -> f64 {
        self.values.sum()
    }
}

pub fn heat_kernel_column(
    env: &Environment,
    y: usize,
    params: &EvolutionParams,
) -> Result<Vec<KernelColumn>> {
    let lat = env.lattice();
    if y >= lat.vertex_count() {
        return Err(Error::InvalidArgument(format!(
            "source vertex {y} out of range"
        )));
    }
    let f0 = ScalarField::indicator(lat, y);
    let snapshots = evolve(env, &f0, params)?;
    Ok(snapshots
        .into_iter()
        .zip(params.times())
        .map(|(values, time)| KernelColumn {
            source: y,
            time,
            values,
        })
        .collect())
}

/// One row of the on-diagonal series: the return probability at the origin
/// together with the mass and the half-time square sum that the semigroup
/// identity `p_t(0,0) = sum_x p_{t/2}(x,0)^2` pairs it with.
#[derive(Debug, Clone)]
pub struct DiagonalSample {
    pub t: f64,
    pub p00: f64,
    pub mass: f64,
    pub half_sq_sum: f64,
}

impl DiagonalSample {
    /// |p_t(0,0) - sum_x p_{t/2}(x,0)^2|, zero up to rounding on the grid.
    pub fn identity_gap(&self) -> f64 {
        (self.p00 - self.half_sq_sum).abs()
    }
}

/// On-diagonal kernel series from the origin. Requested times are snapped to
/// even step counts so that t/2 lies on the grid and the identity check is
/// exact.
pub fn on_diagonal_series(
    env: &Environment,
    params: &EvolutionParams,
) -> Result<Vec<DiagonalSample>> {
    let lat = env.lattice();
    let f0 = ScalarField::indicator(lat, 0);
    check_step(env, &f0, params.dt)?;

    let even_steps: Vec<u64> = {
        let mut s: Vec<u64> = params.steps.iter().map(|&n| n & !1u64).collect();
        s.dedup();
        s
    };
    let half_steps: Vec<u64> = even_steps.iter().map(|&n| n / 2).collect();

    let a = env.conductances().values();
    let mut cur = f0;
    let mut next = ScalarField::zeros(lat);
    let max_step = *even_steps.last().expect("non-empty grid");
    let mut half_sums = std::collections::HashMap::new();
    let mut rows: Vec<DiagonalSample> = Vec::with_capacity(even_steps.len());
    for k in 0..=max_step {
        if half_steps.binary_search(&k).is_ok() {
            let sq: Vec<f64> = cur.values().iter().map(|p| p * p).collect();
            half_sums.insert(k, crate::math::pairwise_sum(&sq));
        }
        if even_steps.binary_search(&k).is_ok() {
            rows.push(DiagonalSample {
                t: k as f64 * params.dt,
                p00: cur.values()[0],
                mass: cur.sum(),
                half_sq_sum: half_sums[&(k / 2)],
            });
        }
        if k < max_step {
            step_into(lat, a, params.dt, cur.values(), next.values_mut());
            std::mem::swap(&mut cur, &mut next);
        }
    }
    Ok(rows)
}

fn steps_on_grid(t: f64, dt: f64) -> Result<u64> {
    let n = (t / dt).round();
    if (n * dt - t).abs() > 1e-9 * dt.max(t.abs()) {
        return Err(Error::OffGridTime { t, dt });
    }
    Ok(n as u64)
}

/// Maximum over x of |p_{t+s}(x,0) - sum_z p_t(x,z) p_s(z,0)|, with the
/// composition formed from independently evolved columns. For the Euler
/// scheme on the step grid this is zero up to float noise.
pub fn check_semigroup(env: &Environment, t: f64, s: f64, params: &EvolutionParams) -> Result<f64> {
    let lat = env.lattice();
    let n = lat.vertex_count();
    let nt = steps_on_grid(t, params.dt)?;
    let ns = steps_on_grid(s, params.dt)?;

    let delta0 = ScalarField::indicator(lat, 0);
    let combined = evolve_steps(env, &delta0, params.dt, nt + ns);
    let p_s0 = evolve_steps(env, &delta0, params.dt, ns);

    let mut composed = vec![0.0; n];
    for z in 0..n {
        let w = p_s0.values()[z];
        if w == 0.0 {
            continue;
        }
        let col = evolve_steps(env, &ScalarField::indicator(lat, z), params.dt, nt);
        for (c, p) in composed.iter_mut().zip(col.values()) {
            *c += p * w;
        }
    }
    Ok(combined
        .values()
        .iter()
        .zip(&composed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Largest excursion of the snapshots outside the initial range
/// `[min f0, max f0]`; exactly zero for convex-combination updates.
pub fn max_principle_excursion(f0: &ScalarField, snapshots: &[ScalarField]) -> f64 {
    let lo = f0.min();
    let hi = f0.max();
    snapshots
        .iter()
        .map(|f| (lo - f.min()).max(f.max() - hi).max(0.0))
        .fold(0.0, f64::max)
}
