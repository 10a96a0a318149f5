//! Minimal-resistance weights and paths.
//!
//! The weight of an edge is the reciprocal of the least resistance
//! `sum_b 1/a(b)` over nearest-neighbor paths joining its endpoints; the
//! optimal path is certified by Dijkstra with a fixed deterministic
//! tie-break (lexicographically smallest edge-index sequence). Zero
//! conductances count as deleted edges. A constructive detour certificate
//! scans parallel copies of the edge along a chosen direction until one
//! clears a threshold; its resistance upper-bounds the optimum.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::environment::{moment_condition_check, sample_environment, ConductanceLaw, Environment};
use crate::error::{Error, Result};
use crate::lattice::{ScalarField, TorusLattice};
use crate::math::{derive_seed, mean_stderr};

/// How a certificate's path was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Optimal,
    Detour,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Optimal => write!(f, "optimal"),
            Provenance::Detour => write!(f, "detour"),
        }
    }
}

/// A path joining the endpoints of an edge together with the weight it
/// certifies. `resistance` is the path cost `sum_b 1/a(b)` folded from the
/// lower endpoint (kept exactly as computed), and `weight` its reciprocal;
/// for an optimal certificate the resistance is the minimal one.
#[derive(Debug, Clone)]
pub struct PathCertificate {
    pub edge: usize,
    pub weight: f64,
    pub resistance: f64,
    pub path: Vec<u32>,
    pub provenance: Provenance,
}

impl PathCertificate {
    pub fn len(&self) -> usize {
        self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path.is_empty()
    }
}

#[derive(PartialEq)]
struct HeapEntry {
    cost: f64,
    vertex: u32,
}

impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.vertex.cmp(&other.vertex))
    }
}

/// Dijkstra over the positive-conductance subgraph with edge costs 1/a.
/// Among equal-cost shortest paths the lexicographically smallest edge-index
/// sequence wins; lexicographic improvements at equal cost are re-pushed so
/// the rule propagates.
fn dijkstra(env: &Environment, source: usize, target: usize) -> Option<(f64, Vec<u32>)> {
    let lat = env.lattice();
    let d = lat.dim();
    let n = lat.vertex_count();
    let a = env.conductances().values();
    let mut dist = vec![f64::INFINITY; n];
    let mut path: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Reverse(HeapEntry {
        cost: 0.0,
        vertex: source as u32,
    }));
    while let Some(Reverse(HeapEntry { cost, vertex })) = heap.pop() {
        let v = vertex as usize;
        if cost > dist[v] {
            continue;
        }
        if cost > dist[target] {
            break;
        }
        let relax = |w: usize,
                     b: usize,
                     heap: &mut BinaryHeap<Reverse<HeapEntry>>,
                     dist: &mut [f64],
                     path: &mut [Vec<u32>]| {
            let c = a[b];
            if c <= 0.0 {
                return;
            }
            let nd = cost + 1.0 / c;
            if nd < dist[w] {
                dist[w] = nd;
                let mut p = path[v].clone();
                p.push(b as u32);
                path[w] = p;
                heap.push(Reverse(HeapEntry {
                    cost: nd,
                    vertex: w as u32,
                }));
            } else if nd == dist[w] {
                let mut p = path[v].clone();
                p.push(b as u32);
                if p < path[w] {
                    path[w] = p;
                    heap.push(Reverse(HeapEntry {
                        cost: nd,
                        vertex: w as u32,
                    }));
                }
            }
        };
        for i in 0..d {
            let u = lat.up(v, i);
            relax(u, v * d + i, &mut heap, &mut dist, &mut path);
            let w = lat.down(v, i);
            relax(w, w * d + i, &mut heap, &mut dist, &mut path);
        }
    }
    if dist[target].is_finite() {
        Some((dist[target], std::mem::take(&mut path[target])))
    } else {
        None
    }
}

/// Optimal certificate: weight `w(e)` with `1/w(e)` the least path
/// resistance between the endpoints of `e`, and the certified path itself.
pub fn minimal_resistance(env: &Environment, e: usize) -> Result<PathCertificate> {
    let lat = env.lattice();
    if e >= lat.edge_count() {
        return Err(Error::InvalidArgument(format!("edge {e} out of range")));
    }
    let (under, over) = lat.edge_endpoints(e);
    match dijkstra(env, under, over) {
        Some((resistance, path)) => Ok(PathCertificate {
            edge: e,
            weight: 1.0 / resistance,
            resistance,
            path,
            provenance: Provenance::Optimal,
        }),
        None => Err(Error::Disconnected { edge: e }),
    }
}

/// Threshold and direction order for the constructive detour scan.
#[derive(Debug, Clone)]
pub struct DetourParams {
    epsilon: f64,
    search_order: Vec<usize>,
}

impl DetourParams {
    /// `epsilon` must leave mass above it in at least one scanned direction,
    /// otherwise the scan could never succeed.
    pub fn new(epsilon: f64, search_order: Vec<usize>, laws: &[ConductanceLaw]) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "detour threshold must be positive, got {epsilon}"
            )));
        }
        if search_order.is_empty() || search_order.iter().any(|&i| i >= laws.len()) {
            return Err(Error::InvalidArgument(
                "detour search order must list valid directions".into(),
            ));
        }
        if !search_order.iter().any(|&i| laws[i].cdf(epsilon) < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "no scanned direction has P(a > {epsilon}) > 0"
            )));
        }
        Ok(Self {
            epsilon,
            search_order,
        })
    }

    /// Default threshold: the smallest per-direction detour threshold
    /// (the median for continuous laws, a point strictly below the essential
    /// sup for atomic ones), scanning directions in index order.
    pub fn default_for(laws: &[ConductanceLaw]) -> Result<Self> {
        let epsilon = laws
            .iter()
            .map(|l| l.detour_threshold())
            .fold(f64::INFINITY, f64::min);
        Self::new(epsilon, (0..laws.len()).collect(), laws)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn search_order(&self) -> &[usize] {
        &self.search_order
    }
}

/// Constructive detour certificate: starting from the lower endpoint of `e`,
/// scan k = 0, 1, 2, ... parallel copies of `e` along a scan direction until
/// one has conductance above the threshold, then cross there and walk back,
/// giving a path of 2k + 1 edges. The scan is truncated at floor(L/2) steps
/// per direction.
pub fn detour_path(env: &Environment, e: usize, params: &DetourParams) -> Result<PathCertificate> {
    let lat = env.lattice();
    if e >= lat.edge_count() {
        return Err(Error::InvalidArgument(format!("edge {e} out of range")));
    }
    let a = env.conductances().values();
    let eps = params.epsilon;
    let (z, _over) = lat.edge_endpoints(e);
    let j = lat.edge_direction(e);

    let certify = |path: Vec<u32>| -> PathCertificate {
        let resistance: f64 = path.iter().map(|&b| 1.0 / a[b as usize]).sum();
        PathCertificate {
            edge: e,
            weight: 1.0 / resistance,
            resistance,
            path,
            provenance: Provenance::Detour,
        }
    };

    // k = 0: the parallel copy is e itself.
    if a[e] > eps {
        return Ok(certify(vec![e as u32]));
    }

    let max_k = lat.side() / 2;
    for &i in &params.search_order {
        if i == j {
            // Copies of e along its own direction do not form a detour that
            // returns to the endpoints of e; skip.
            continue;
        }
        let mut out_rail: Vec<u32> = Vec::new(); // from z, walking up i
        let mut back_rail: Vec<u32> = Vec::new(); // from z + e_j, walking up i
        let mut cur_out = z;
        let mut cur_back = lat.up(z, j);
        let mut blocked = false;
        for _k in 1..=max_k {
            let rail_o = lat.edge_index(cur_out, i);
            let rail_b = lat.edge_index(cur_back, i);
            if a[rail_o] <= 0.0 || a[rail_b] <= 0.0 {
                blocked = true;
                break;
            }
            out_rail.push(rail_o as u32);
            back_rail.push(rail_b as u32);
            cur_out = lat.up(cur_out, i);
            cur_back = lat.up(cur_back, i);
            let crossing = lat.edge_index(cur_out, j);
            if a[crossing] > eps {
                let mut path = out_rail.clone();
                path.push(crossing as u32);
                path.extend(back_rail.iter().rev());
                return Ok(certify(path));
            }
        }
        let _ = blocked;
    }
    Err(Error::ScanExhausted {
        edge: e,
        steps: max_k,
    })
}

/// Map from an edge b to the set of edges whose certified path uses b.
#[derive(Debug, Clone)]
pub struct InversePathIndex {
    sets: Vec<Vec<u32>>,
}

impl InversePathIndex {
    /// Edges e with b in path(e), sorted ascending.
    pub fn edges_through(&self, b: usize) -> &[u32] {
        &self.sets[b]
    }

    pub fn contains(&self, b: usize, e: usize) -> bool {
        self.sets[b].binary_search(&(e as u32)).is_ok()
    }

    /// Total size, which double counting makes equal to the summed path
    /// lengths.
    pub fn total_size(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// Invert the path relation of a full set of certificates (one per edge, in
/// edge order).
pub fn build_inverse_index(
    certs: &[PathCertificate],
    lattice: &TorusLattice,
) -> Result<InversePathIndex> {
    if certs.len() != lattice.edge_count() {
        return Err(Error::InvalidArgument(format!(
            "expected one certificate per edge ({}), got {}",
            lattice.edge_count(),
            certs.len()
        )));
    }
    let mut sets = vec![Vec::new(); lattice.edge_count()];
    for (e, cert) in certs.iter().enumerate() {
        if cert.edge != e {
            return Err(Error::InvalidArgument(format!(
                "certificate {e} is for edge {}",
                cert.edge
            )));
        }
        for &b in &cert.path {
            sets[b as usize].push(e as u32);
        }
    }
    Ok(InversePathIndex { sets })
}

/// Check the energy comparison `w(e) |grad f(e)|^2 <= sum_{b in path}
/// a(b) |grad f(b)|^2` for one certificate and one test field.
pub fn verify_energy_inequality(
    env: &Environment,
    cert: &PathCertificate,
    f: &ScalarField,
) -> bool {
    let lat = env.lattice();
    let a = env.conductances().values();
    let fv = f.values();
    let grad = |b: usize| {
        let (u, o) = lat.edge_endpoints(b);
        fv[o] - fv[u]
    };
    let ge = grad(cert.edge);
    let lhs = cert.weight * ge * ge;
    let rhs: f64 = cert
        .path
        .iter()
        .map(|&b| {
            let g = grad(b as usize);
            a[b as usize] * g * g
        })
        .sum();
    lhs <= rhs + 1e-12
}

/// The scale-averaged inverse-weight statistic
/// `(sup_r r^-d sum_{|overline(e)| <= r} w(e)^-q)^r_exponent`, with the sup
/// over integer radii 1..floor(L/2) (minimal-image validity).
#[derive(Debug, Clone)]
pub struct ModerationStatistic {
    pub q: f64,
    pub r_exponent: f64,
    pub value: f64,
}

pub fn compute_moderation(
    env: &Environment,
    q: f64,
    r_exponent: f64,
) -> Result<ModerationStatistic> {
    if !(q > 0.0) || !(r_exponent > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "moderation exponents must be positive, got q={q}, r_exponent={r_exponent}"
        )));
    }
    let lat = env.lattice();
    let certs: Vec<Result<PathCertificate>> = (0..lat.edge_count())
        .into_par_iter()
        .map(|e| minimal_resistance(env, e))
        .collect();
    let mut w_inv_q = vec![0.0; lat.edge_count()];
    for (e, c) in certs.into_iter().enumerate() {
        w_inv_q[e] = c?.weight.powf(-q);
    }
    let over_dist2: Vec<f64> = (0..lat.edge_count())
        .map(|e| lat.torus_dist2(lat.edge_endpoints(e).1))
        .collect();
    let d = lat.dim() as i32;
    let mut sup = 0.0f64;
    for r in 1..=(lat.side() / 2) {
        let r2 = (r * r) as f64;
        let sum: f64 = w_inv_q
            .iter()
            .zip(&over_dist2)
            .filter(|(_, &dd)| dd <= r2)
            .map(|(w, _)| w)
            .sum();
        sup = sup.max(sum / (r as f64).powi(d));
    }
    Ok(ModerationStatistic {
        q,
        r_exponent,
        value: sup.powf(r_exponent),
    })
}

/// Monte-Carlo estimates of `<w(e)^-q>` and `<|path(e)|^q>` over independent
/// environments, one central edge each.
#[derive(Debug, Clone)]
pub struct WeightMomentRow {
    pub q: f64,
    pub w_inv_q_mean: f64,
    pub w_inv_q_stderr: f64,
    pub path_len_q_mean: f64,
    pub path_len_q_stderr: f64,
    pub disconnected: usize,
    /// Set when the law fails the moment condition for this q, flagging the
    /// estimate as formally divergent.
    pub moment_flagged: bool,
}

pub fn weight_moment_estimate(
    laws: &[ConductanceLaw],
    lattice: &Arc<TorusLattice>,
    q_list: &[f64],
    reps: usize,
    seed: u64,
) -> Result<Vec<WeightMomentRow>> {
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be positive".into()));
    }
    let verdicts = moment_condition_check(laws, q_list)?;
    let center: Vec<usize> = vec![lattice.side() / 2; lattice.dim()];
    let e = lattice.edge_index(lattice.vertex_index(&center), 0);
    let samples: Vec<Option<(f64, f64)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let env = sample_environment(laws, lattice, derive_seed(seed, rep as u64))
                .expect("validated laws");
            match minimal_resistance(&env, e) {
                Ok(cert) => Some((cert.weight, cert.len() as f64)),
                Err(_) => None,
            }
        })
        .collect();
    let disconnected = samples.iter().filter(|s| s.is_none()).count();
    let mut rows = Vec::with_capacity(q_list.len());
    for (&q, verdict) in q_list.iter().zip(&verdicts) {
        let w_pows: Vec<f64> = samples.iter().flatten().map(|(w, _)| w.powf(-q)).collect();
        let len_pows: Vec<f64> = samples.iter().flatten().map(|(_, l)| l.powf(q)).collect();
        let (wm, ws) = mean_stderr(&w_pows);
        let (lm, ls) = mean_stderr(&len_pows);
        rows.push(WeightMomentRow {
            q,
            w_inv_q_mean: wm,
            w_inv_q_stderr: ws,
            path_len_q_mean: lm,
            path_len_q_stderr: ls,
            disconnected,
            moment_flagged: !verdict.pass,
        });
    }
    Ok(rows)
}
