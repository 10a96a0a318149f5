//! Periodic torus geometry and the discrete calculus built on it.
//!
//! Vertices of the d-dimensional torus of side L are indexed row-major over
//! coordinates (last coordinate fastest). Each vertex owns the d edges
//! pointing in the positive coordinate directions, so edge `v * d + i` joins
//! `v` to its neighbor in direction `i`; the lower endpoint of an edge is the
//! vertex it is indexed by, the upper endpoint sits one step up in the edge's
//! direction. This fixed indexing keeps CSV output reproducible.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Hard cap on the vertex count accepted by [`TorusLattice::new`].
pub const MAX_VERTICES: usize = 1 << 24;

/// A d-dimensional discrete torus of side length L with precomputed
/// neighbor tables.
#[derive(Debug)]
pub struct TorusLattice {
    dim: usize,
    side: usize,
    vertex_count: usize,
    edge_count: usize,
    strides: Vec<usize>,
    // Neighbor tables laid out as [direction * vertex_count + vertex].
    up: Vec<u32>,
    down: Vec<u32>,
}

impl TorusLattice {
    /// Build the torus with `dim >= 1` and `side >= 3`. The lower bound on
    /// the side length keeps the edge set simple: below it, periodic wrap
    /// would create duplicate edges between a vertex pair.
    pub fn new(dim: usize, side: usize) -> Result<Arc<Self>> {
        if dim < 1 {
            return Err(Error::InvalidLattice(format!(
                "dimension must be >= 1, got {dim}"
            )));
        }
        if side < 3 {
            return Err(Error::InvalidLattice(format!(
                "side length must be >= 3, got {side}"
            )));
        }
        let mut vertex_count: usize = 1;
        for _ in 0..dim {
            vertex_count = vertex_count.checked_mul(side).ok_or_else(|| {
                Error::InvalidLattice(format!("{side}^{dim} overflows the vertex index"))
            })?;
            if vertex_count > MAX_VERTICES {
                return Err(Error::InvalidLattice(format!(
                    "{side}^{dim} exceeds the vertex cap {MAX_VERTICES}"
                )));
            }
        }
        let mut strides = vec![1usize; dim];
        for k in (0..dim.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * side;
        }
        let mut up = vec![0u32; dim * vertex_count];
        let mut down = vec![0u32; dim * vertex_count];
        for v in 0..vertex_count {
            for i in 0..dim {
                let coord = (v / strides[i]) % side;
                let u = if coord + 1 == side {
                    v - (side - 1) * strides[i]
                } else {
                    v + strides[i]
                };
                let w = if coord == 0 {
                    v + (side - 1) * strides[i]
                } else {
                    v - strides[i]
                };
                up[i * vertex_count + v] = u as u32;
                down[i * vertex_count + v] = w as u32;
            }
        }
        Ok(Arc::new(Self {
            dim,
            side,
            vertex_count,
            edge_count: dim * vertex_count,
            strides,
            up,
            down,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Neighbor of `v` one step up in direction `dir`.
    #[inline]
    pub fn up(&self, v: usize, dir: usize) -> usize {
        self.up[dir * self.vertex_count + v] as usize
    }

    /// Neighbor of `v` one step down in direction `dir`.
    #[inline]
    pub fn down(&self, v: usize, dir: usize) -> usize {
        self.down[dir * self.vertex_count + v] as usize
    }

    pub(crate) fn up_table(&self, dir: usize) -> &[u32] {
        &self.up[dir * self.vertex_count..(dir + 1) * self.vertex_count]
    }

    pub(crate) fn down_table(&self, dir: usize) -> &[u32] {
        &self.down[dir * self.vertex_count..(dir + 1) * self.vertex_count]
    }

    pub fn vertex_index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.dim);
        coords
            .iter()
            .zip(&self.strides)
            .map(|(c, s)| (c % self.side) * s)
            .sum()
    }

    pub fn vertex_coords(&self, v: usize) -> Vec<usize> {
        self.strides.iter().map(|s| (v / s) % self.side).collect()
    }

    /// Edge joining `v` to `up(v, dir)`.
    #[inline]
    pub fn edge_index(&self, v: usize, dir: usize) -> usize {
        v * self.dim + dir
    }

    /// Lower and upper endpoints of an edge.
    #[inline]
    pub fn edge_endpoints(&self, e: usize) -> (usize, usize) {
        let v = e / self.dim;
        let dir = e % self.dim;
        (v, self.up(v, dir))
    }

    #[inline]
    pub fn edge_direction(&self, e: usize) -> usize {
        e % self.dim
    }

    /// Vertex at `v + offset`, wrapping each coordinate around the torus.
    pub fn vertex_add(&self, v: usize, offset: &[i64]) -> usize {
        debug_assert_eq!(offset.len(), self.dim);
        let side = self.side as i64;
        let mut idx = 0usize;
        for (k, s) in self.strides.iter().enumerate() {
            let c = ((v / s) % self.side) as i64;
            let shifted = (c + offset[k]).rem_euclid(side) as usize;
            idx += shifted * s;
        }
        idx
    }

    /// Squared Euclidean distance from the origin vertex under the
    /// minimal-image convention per coordinate.
    pub fn torus_dist2(&self, v: usize) -> f64 {
        let mut sum = 0.0;
        for s in &self.strides {
            let c = (v / s) % self.side;
            let m = c.min(self.side - c);
            sum += (m * m) as f64;
        }
        sum
    }

    pub fn same_shape(&self, other: &TorusLattice) -> bool {
        self.dim == other.dim && self.side == other.side
    }
}

/// Real-valued field with one entry per vertex.
#[derive(Debug, Clone)]
pub struct ScalarField {
    lattice: Arc<TorusLattice>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(lattice: &Arc<TorusLattice>) -> Self {
        Self {
            lattice: Arc::clone(lattice),
            values: vec![0.0; lattice.vertex_count()],
        }
    }

    pub fn constant(lattice: &Arc<TorusLattice>, c: f64) -> Self {
        Self {
            lattice: Arc::clone(lattice),
            values: vec![c; lattice.vertex_count()],
        }
    }

    /// Indicator of a single vertex.
    pub fn indicator(lattice: &Arc<TorusLattice>, v: usize) -> Self {
        let mut f = Self::zeros(lattice);
        f.values[v] = 1.0;
        f
    }

    pub fn from_values(lattice: &Arc<TorusLattice>, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.vertex_count() {
            return Err(Error::InvalidField(format!(
                "expected {} vertex values, got {}",
                lattice.vertex_count(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!("non-finite value {bad}")));
        }
        Ok(Self {
            lattice: Arc::clone(lattice),
            values,
        })
    }

    pub fn lattice(&self) -> &Arc<TorusLattice> {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sum(&self) -> f64 {
        crate::math::pairwise_sum(&self.values)
    }

    pub fn dot(&self, other: &ScalarField) -> f64 {
        debug_assert!(self.lattice.same_shape(&other.lattice));
        let prods: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .collect();
        crate::math::pairwise_sum(&prods)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Real-valued field with one entry per edge.
#[derive(Debug, Clone)]
pub struct EdgeField {
    lattice: Arc<TorusLattice>,
    values: Vec<f64>,
}

impl EdgeField {
    pub fn zeros(lattice: &Arc<TorusLattice>) -> Self {
        Self {
            lattice: Arc::clone(lattice),
            values: vec![0.0; lattice.edge_count()],
        }
    }

    pub fn from_values(lattice: &Arc<TorusLattice>, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.edge_count() {
            return Err(Error::InvalidField(format!(
                "expected {} edge values, got {}",
                lattice.edge_count(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidField(format!("non-finite value {bad}")));
        }
        Ok(Self {
            lattice: Arc::clone(lattice),
            values,
        })
    }

    pub fn lattice(&self) -> &Arc<TorusLattice> {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn dot(&self, other: &EdgeField) -> f64 {
        debug_assert!(self.lattice.same_shape(&other.lattice));
        let prods: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .collect();
        crate::math::pairwise_sum(&prods)
    }
}

/// Discrete gradient: for each edge, the value at the upper endpoint minus
/// the value at the lower endpoint.
pub fn gradient(f: &ScalarField) -> EdgeField {
    let lat = f.lattice();
    let d = lat.dim();
    let n = lat.vertex_count();
    let fv = f.values();
    let mut out = vec![0.0; lat.edge_count()];
    for i in 0..d {
        let up = lat.up_table(i);
        for v in 0..n {
            out[v * d + i] = fv[up[v] as usize] - fv[v];
        }
    }
    EdgeField {
        lattice: Arc::clone(lat),
        values: out,
    }
}

/// Discrete divergence, the l2 adjoint of [`gradient`]: for every scalar f
/// and edge field h, <gradient f, h> over edges equals <f, divergence h>
/// over vertices.
pub fn divergence(h: &EdgeField) -> ScalarField {
    let lat = h.lattice();
    let d = lat.dim();
    let n = lat.vertex_count();
    let hv = h.values();
    let mut out = vec![0.0; n];
    for i in 0..d {
        let down = lat.down_table(i);
        for v in 0..n {
            let incoming = hv[down[v] as usize * d + i];
            let outgoing = hv[v * d + i];
            out[v] += incoming - outgoing;
        }
    }
    ScalarField {
        lattice: Arc::clone(lat),
        values: out,
    }
}

/// Divergence-form generator with the positive-semidefinite sign convention:
/// `divergence(a * gradient(f))`, i.e. at each vertex the sum over neighbors
/// of a((x,y)) (f(x) - f(y)).
pub fn apply_generator(conductances: &EdgeField, f: &ScalarField) -> Result<ScalarField> {
    let lat = f.lattice();
    if !lat.same_shape(conductances.lattice()) {
        return Err(Error::LatticeMismatch);
    }
    let d = lat.dim();
    let n = lat.vertex_count();
    let a = conductances.values();
    let fv = f.values();
    let mut out = vec![0.0; n];
    for i in 0..d {
        let up = lat.up_table(i);
        let down = lat.down_table(i);
        for v in 0..n {
            let dn = down[v] as usize;
            out[v] +=
                a[v * d + i] * (fv[v] - fv[up[v] as usize]) + a[dn * d + i] * (fv[v] - fv[dn]);
        }
    }
    Ok(ScalarField {
        lattice: Arc::clone(lat),
        values: out,
    })
}

/// Parameters of the polynomial space-time weight
/// `omega_alpha(t, x) = (|x|^2 / (t+1) + 1)^(alpha/2)`.
#[derive(Debug, Clone, Copy)]
pub struct WeightSpec {
    alpha: f64,
    t: f64,
}

impl WeightSpec {
    pub fn new(alpha: f64, t: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "weight exponent must be finite, got {alpha}"
            )));
        }
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight time must be >= 0, got {t}"
            )));
        }
        Ok(Self { alpha, t })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Squared weight at a vertex, with |x| the torus distance from the origin.
    pub fn squared_at(&self, lattice: &TorusLattice, v: usize) -> f64 {
        (lattice.torus_dist2(v) / (self.t + 1.0) + 1.0).powf(self.alpha)
    }
}

/// Weighted power sum `sum_x omega_alpha(t, x)^2 |f(x)|^power` with `power >= 1`.
pub fn weighted_sum(f: &ScalarField, w: &WeightSpec, power: u32) -> f64 {
    debug_assert!(power >= 1);
    let lat = f.lattice();
    let terms: Vec<f64> = f
        .values()
        .iter()
        .enumerate()
        .map(|(v, &x)| w.squared_at(lat, v) * x.abs().powi(power as i32))
        .collect();
    crate::math::pairwise_sum(&terms)
}
