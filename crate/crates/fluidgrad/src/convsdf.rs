//! Signed-distance collider queries and the differentiable collision solve.
//!
//! [`convsdf`] evaluates, per particle, a weighted stencil of samples of the
//! scene distance field min_j SDF_j(p + k * dilation). Object poses may be
//! driven by control channels (rotations about an axis, translations along an
//! axis); the op's adjoint propagates to particle positions and to those
//! channels, taking the subgradient through the hard min (ties go to the
//! lowest object index).
//!
//! [`solve_object_collisions`] composes four stencil evaluations into the
//! push-out update P' = P + relu(-sdf(P)) * n, with n the normalized
//! axis-differenced field gradient.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;
use std::sync::Arc;

use nalgebra::{Unit, Vector3};

use crate::autodiff::{concat3, row_normalize, Backward, GradSink, Value, Var};
use crate::pose::RigidPose;
use crate::Error;

/// Norm threshold below which a differenced collision normal counts as
/// degenerate and the particle is left unmoved.
pub const DEGENERATE_NORMAL_EPS: f64 = 1e-12;

/// Analytic or sampled signed-distance shape in its local frame.
/// Negative inside, positive outside.
#[derive(Debug, Clone)]
pub enum SdfShape {
    /// Half space: sdf = normal . p - offset.
    Plane { normal: Unit<Vector3<f64>>, offset: f64 },
    Sphere { radius: f64 },
    /// Axis-aligned box centered on the origin.
    Box { half_extents: Vector3<f64> },
    /// Capped cylinder along the local y axis, centered on the origin.
    Cylinder { radius: f64, half_height: f64 },
    /// Trilinearly interpolated sample grid.
    Grid(Arc<GridSdf>),
}

impl SdfShape {
    /// Local-frame signed distance.
    pub fn distance(&self, p: Vector3<f64>) -> f64 {
        match self {
            SdfShape::Plane { normal, offset } => normal.dot(&p) - offset,
            SdfShape::Sphere { radius } => p.norm() - radius,
            SdfShape::Box { half_extents } => {
                let q = p.abs() - half_extents;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            SdfShape::Cylinder { radius, half_height } => {
                let rxz = (p.x * p.x + p.z * p.z).sqrt();
                let dx = rxz - radius;
                let dy = p.y.abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                let inside = dx.max(dy).min(0.0);
                outside + inside
            }
            SdfShape::Grid(grid) => grid.distance(p),
        }
    }

    /// Local-frame gradient of [`Self::distance`]. Exact almost everywhere;
    /// zero at isolated degenerate points (sphere center, cylinder axis).
    pub fn gradient(&self, p: Vector3<f64>) -> Vector3<f64> {
        match self {
            SdfShape::Plane { normal, .. } => normal.into_inner(),
            SdfShape::Sphere { .. } => {
                let n = p.norm();
                if n == 0.0 {
                    Vector3::zeros()
                } else {
                    p / n
                }
            }
            SdfShape::Box { half_extents } => {
                let q = p.abs() - half_extents;
                let qp = q.map(|v| v.max(0.0));
                let outside = qp.norm();
                if outside > 0.0 {
                    Vector3::new(
                        qp.x / outside * p.x.signum(),
                        qp.y / outside * p.y.signum(),
                        qp.z / outside * p.z.signum(),
                    )
                } else {
                    // Inside: gradient points along the closest face axis.
                    let mut axis = 0;
                    if q.y > q[axis] {
                        axis = 1;
                    }
                    if q.z > q[axis] {
                        axis = 2;
                    }
                    let mut g = Vector3::zeros();
                    g[axis] = p[axis].signum();
                    g
                }
            }
            SdfShape::Cylinder { radius, half_height } => {
                let rxz = (p.x * p.x + p.z * p.z).sqrt();
                let dx = rxz - radius;
                let dy = p.y.abs() - half_height;
                let radial = if rxz > 0.0 {
                    Vector3::new(p.x / rxz, 0.0, p.z / rxz)
                } else {
                    Vector3::zeros()
                };
                let vertical = Vector3::new(0.0, p.y.signum(), 0.0);
                if dx > 0.0 && dy > 0.0 {
                    let norm = (dx * dx + dy * dy).sqrt();
                    (radial * dx + vertical * dy) / norm
                } else if dx > dy {
                    radial
                } else {
                    vertical
                }
            }
            SdfShape::Grid(grid) => grid.gradient(p),
        }
    }

    /// Axis-aligned bounds of the shape in its local frame, or `None` for
    /// unbounded shapes (planes). Grid shapes report their sample box.
    pub fn local_bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        match self {
            SdfShape::Plane { .. } => None,
            SdfShape::Sphere { radius } => {
                Some((Vector3::repeat(-radius), Vector3::repeat(*radius)))
            }
            SdfShape::Box { half_extents } => Some((-half_extents, *half_extents)),
            SdfShape::Cylinder { radius, half_height } => Some((
                Vector3::new(-radius, -half_height, -radius),
                Vector3::new(*radius, *half_height, *radius),
            )),
            SdfShape::Grid(grid) => {
                let [nx, ny, nz] = grid.dims();
                let extent =
                    Vector3::new((nx - 1) as f64, (ny - 1) as f64, (nz - 1) as f64) * grid.cell();
                Some((grid.origin(), grid.origin() + extent))
            }
        }
    }
}

/// Regular sample grid with trilinear interpolation. Queries outside the grid
/// box return the distance to the box plus the boundary sample at the clamped
/// point, so the field keeps growing away from the data.
#[derive(Debug, Clone)]
pub struct GridSdf {
    nx: usize,
    ny: usize,
    nz: usize,
    cell: f64,
    origin: Vector3<f64>,
    /// Samples stored x-fastest: index = x + nx*(y + ny*z).
    samples: Vec<f64>,
}

impl GridSdf {
    pub fn new(
        dims: [usize; 3],
        cell: f64,
        origin: Vector3<f64>,
        samples: Vec<f64>,
    ) -> Result<Self, Error> {
        let [nx, ny, nz] = dims;
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::invalid(format!("grid sdf needs at least 2 samples per axis, got {dims:?}")));
        }
        if !(cell.is_finite() && cell > 0.0) {
            return Err(Error::invalid(format!("grid sdf cell size must be finite and > 0, got {cell}")));
        }
        if samples.len() != nx * ny * nz {
            return Err(Error::invalid(format!(
                "grid sdf sample count {} does not match {nx}x{ny}x{nz}",
                samples.len()
            )));
        }
        Ok(Self { nx, ny, nz, cell, origin, samples })
    }

    /// Sample an analytic field onto a grid.
    pub fn from_fn(
        dims: [usize; 3],
        cell: f64,
        origin: Vector3<f64>,
        f: impl Fn(Vector3<f64>) -> f64,
    ) -> Result<Self, Error> {
        let [nx, ny, nz] = dims;
        let mut samples = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = origin + Vector3::new(x as f64, y as f64, z as f64) * cell;
                    samples.push(f(p));
                }
            }
        }
        Self::new(dims, cell, origin, samples)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    fn upper(&self) -> Vector3<f64> {
        self.origin
            + Vector3::new((self.nx - 1) as f64, (self.ny - 1) as f64, (self.nz - 1) as f64) * self.cell
    }

    #[inline]
    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.samples[x + self.nx * (y + self.ny * z)]
    }

    /// Trilinear interpolation at a point inside the grid box.
    fn interior(&self, p: Vector3<f64>) -> (f64, Vector3<f64>) {
        let t = (p - self.origin) / self.cell;
        let clamp_idx = |v: f64, n: usize| -> (usize, f64) {
            let i = (v.floor() as isize).clamp(0, n as isize - 2) as usize;
            (i, (v - i as f64).clamp(0.0, 1.0))
        };
        let (ix, fx) = clamp_idx(t.x, self.nx);
        let (iy, fy) = clamp_idx(t.y, self.ny);
        let (iz, fz) = clamp_idx(t.z, self.nz);
        let c000 = self.at(ix, iy, iz);
        let c100 = self.at(ix + 1, iy, iz);
        let c010 = self.at(ix, iy + 1, iz);
        let c110 = self.at(ix + 1, iy + 1, iz);
        let c001 = self.at(ix, iy, iz + 1);
        let c101 = self.at(ix + 1, iy, iz + 1);
        let c011 = self.at(ix, iy + 1, iz + 1);
        let c111 = self.at(ix + 1, iy + 1, iz + 1);
        let c00 = c000 + (c100 - c000) * fx;
        let c10 = c010 + (c110 - c010) * fx;
        let c01 = c001 + (c101 - c001) * fx;
        let c11 = c011 + (c111 - c011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        let value = c0 + (c1 - c0) * fz;
        let dx = ((c100 - c000) * (1.0 - fy) + (c110 - c010) * fy) * (1.0 - fz)
            + ((c101 - c001) * (1.0 - fy) + (c111 - c011) * fy) * fz;
        let dy = ((c010 - c000) * (1.0 - fx) + (c110 - c100) * fx) * (1.0 - fz)
            + ((c011 - c001) * (1.0 - fx) + (c111 - c101) * fx) * fz;
        let dz = ((c001 - c000) * (1.0 - fx) + (c101 - c100) * fx) * (1.0 - fy)
            + ((c011 - c010) * (1.0 - fx) + (c111 - c110) * fx) * fy;
        (value, Vector3::new(dx, dy, dz) / self.cell)
    }

    pub fn distance(&self, p: Vector3<f64>) -> f64 {
        let lo = self.origin;
        let hi = self.upper();
        let pc = Vector3::new(p.x.clamp(lo.x, hi.x), p.y.clamp(lo.y, hi.y), p.z.clamp(lo.z, hi.z));
        let outside = (p - pc).norm();
        self.interior(pc).0 + outside
    }

    pub fn gradient(&self, p: Vector3<f64>) -> Vector3<f64> {
        let lo = self.origin;
        let hi = self.upper();
        let pc = Vector3::new(p.x.clamp(lo.x, hi.x), p.y.clamp(lo.y, hi.y), p.z.clamp(lo.z, hi.z));
        let delta = p - pc;
        let outside = delta.norm();
        let (_, mut g) = self.interior(pc);
        if outside > 0.0 {
            // Clamped axes contribute through the box-distance term only.
            for a in 0..3 {
                if delta[a] != 0.0 {
                    g[a] = 0.0;
                }
            }
            g += delta / outside;
        }
        g
    }
}

/// Binary grid-SDF file: u32 nx, ny, nz; f64 cell; f64 origin x, y, z; then
/// nx*ny*nz f64 samples x-fastest. All little-endian.
pub fn write_grid_sdf(path: &Path, grid: &GridSdf) -> Result<(), Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for n in [grid.nx, grid.ny, grid.nz] {
        f.write_all(&(n as u32).to_le_bytes())?;
    }
    f.write_all(&grid.cell.to_le_bytes())?;
    for a in 0..3 {
        f.write_all(&grid.origin[a].to_le_bytes())?;
    }
    for s in &grid.samples {
        f.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

/// Read a binary grid-SDF file (see [`write_grid_sdf`]).
pub fn read_grid_sdf(path: &Path) -> Result<GridSdf, Error> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut u4 = [0u8; 4];
    let mut u8b = [0u8; 8];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        f.read_exact(&mut u4)?;
        *d = u32::from_le_bytes(u4) as usize;
    }
    f.read_exact(&mut u8b)?;
    let cell = f64::from_le_bytes(u8b);
    let mut origin = Vector3::zeros();
    for a in 0..3 {
        f.read_exact(&mut u8b)?;
        origin[a] = f64::from_le_bytes(u8b);
    }
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| Error::format("grid sdf dimensions overflow".to_string()))?;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        f.read_exact(&mut u8b)?;
        samples.push(f64::from_le_bytes(u8b));
    }
    GridSdf::new(dims, cell, origin, samples).map_err(|e| Error::format(e.to_string()))
}

/// How a control channel moves an object.
#[derive(Debug, Clone)]
pub enum BindingMotion {
    /// Rotate by the channel value (radians) about `axis` through `pivot`,
    /// both in world coordinates.
    RotateAboutAxis { axis: Unit<Vector3<f64>>, pivot: Vector3<f64> },
    /// Translate by the channel value (meters) along `axis` in world
    /// coordinates.
    TranslateAlongAxis { axis: Unit<Vector3<f64>> },
}

/// One control-channel attachment on an object.
#[derive(Debug, Clone)]
pub struct Binding {
    pub channel: usize,
    pub motion: BindingMotion,
}

impl Binding {
    /// World transform of this binding at channel value `c`.
    fn transform(&self, c: f64) -> RigidPose {
        match &self.motion {
            BindingMotion::RotateAboutAxis { axis, pivot } => {
                RigidPose::rotation_about(axis.into_inner(), *pivot, c)
            }
            BindingMotion::TranslateAlongAxis { axis } => {
                RigidPose::from_translation(axis.into_inner() * c)
            }
        }
    }
}

/// A shape with its keyframed base pose and any control bindings. Bindings
/// are applied on top of the base pose in list order (bindings[0] innermost).
#[derive(Debug, Clone)]
pub struct PosedSdf {
    pub shape: SdfShape,
    pub base: RigidPose,
    pub bindings: Vec<Binding>,
}

impl PosedSdf {
    pub fn fixed(shape: SdfShape, base: RigidPose) -> Self {
        Self { shape, base, bindings: Vec::new() }
    }

    /// Map a world point into the shape's local frame under the given
    /// channel values.
    pub fn local_point(&self, p: Vector3<f64>, channels: &[f64]) -> Vector3<f64> {
        let mut u = p;
        for b in self.bindings.iter().rev() {
            u = b.transform(channels[b.channel]).inverse_point(u);
        }
        self.base.inverse_point(u)
    }

    /// World-frame signed distance at `p` under the given channel values.
    pub fn distance(&self, p: Vector3<f64>, channels: &[f64]) -> f64 {
        self.shape.distance(self.local_point(p, channels))
    }

    /// Distance, world-frame gradient, and per-binding channel partials.
    ///
    /// Walking the binding chain inward gives intermediate points u_m; the
    /// partial for a rotation binding is -g_m . (axis x (u_m - pivot)) and
    /// for a translation binding -g_m . axis, where g_m is the distance
    /// gradient expressed in the frame just inside binding m.
    pub fn distance_grad(
        &self,
        p: Vector3<f64>,
        channels: &[f64],
        channel_grads: &mut [f64],
        upstream: f64,
    ) -> (f64, Vector3<f64>) {
        let k = self.bindings.len();
        let mut inner_points = Vec::with_capacity(k);
        let mut u = p;
        for b in self.bindings.iter().rev() {
            u = b.transform(channels[b.channel]).inverse_point(u);
            inner_points.push(u);
        }
        let q = self.base.inverse_point(u);
        let dist = self.shape.distance(q);
        let mut g = self.base.transform_vector(self.shape.gradient(q));
        // inner_points is outermost-first; bindings[0] saw the last entry.
        for (m, b) in self.bindings.iter().enumerate() {
            let um = inner_points[k - 1 - m];
            let partial = match &b.motion {
                BindingMotion::RotateAboutAxis { axis, pivot } => {
                    -g.dot(&axis.into_inner().cross(&(um - pivot)))
                }
                BindingMotion::TranslateAlongAxis { axis } => -g.dot(axis),
            };
            channel_grads[b.channel] += upstream * partial;
            g = b.transform(channels[b.channel]).transform_vector(g);
        }
        (dist, g)
    }
}

/// The collider set seen by one fluid step.
#[derive(Debug, Clone, Default)]
pub struct SdfObjectSet {
    pub objects: Vec<PosedSdf>,
    pub channel_count: usize,
}

impl SdfObjectSet {
    pub fn new(objects: Vec<PosedSdf>, channel_count: usize) -> Self {
        for o in &objects {
            for b in &o.bindings {
                assert!(b.channel < channel_count, "binding channel {} out of range", b.channel);
            }
        }
        Self { objects, channel_count }
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// min over objects; +infinity when the set is empty (no collision).
    pub fn distance(&self, p: Vector3<f64>, channels: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for o in &self.objects {
            let d = o.distance(p, channels);
            if d < best {
                best = d;
            }
        }
        best
    }

    /// Index of the closest object (ties to the lowest index), or None when
    /// empty.
    pub fn argmin(&self, p: Vector3<f64>, channels: &[f64]) -> Option<usize> {
        let mut best = f64::INFINITY;
        let mut idx = None;
        for (i, o) in self.objects.iter().enumerate() {
            let d = o.distance(p, channels);
            if d < best {
                best = d;
                idx = Some(i);
            }
        }
        idx
    }

    /// Largest penetration depth max(-sdf, 0) over an Nx3 position snapshot.
    pub fn max_penetration(&self, positions: &Value, channels: &[f64]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for i in 0..positions.rows() {
            let d = self.distance(positions.row3(i), channels);
            worst = worst.max(-d);
        }
        worst.max(0.0)
    }
}

/// Integer cell offsets with weights, scaled by a dilation step.
#[derive(Debug, Clone)]
pub struct SdfStencil {
    pub cells: Vec<([i32; 3], f64)>,
    pub dilation: f64,
}

impl SdfStencil {
    /// Single sample at the particle itself.
    pub fn center() -> Self {
        Self { cells: vec![([0, 0, 0], 1.0)], dilation: 0.0 }
    }

    /// Central difference along `axis`: -1 at -dilation, +1 at +dilation.
    pub fn axis_difference(axis: usize, dilation: f64) -> Self {
        assert!(axis < 3, "axis must be 0, 1, or 2");
        let mut neg = [0i32; 3];
        let mut pos = [0i32; 3];
        neg[axis] = -1;
        pos[axis] = 1;
        Self { cells: vec![(neg, -1.0), (pos, 1.0)], dilation }
    }
}

/// Weighted stencil of scene-distance samples per particle, recorded on the
/// tape with adjoints for particle positions and control channels.
/// `channels` must contain one scalar Var per control channel of `objects`.
pub fn convsdf(x: &Var, channels: &[Var], objects: &Rc<SdfObjectSet>, stencil: &SdfStencil) -> Var {
    assert_eq!(x.value().cols(), 3, "convsdf positions must be Nx3");
    assert!(!objects.is_empty(), "convsdf needs at least one object");
    assert_eq!(channels.len(), objects.channel_count, "convsdf channel count mismatch");
    for c in channels {
        assert_eq!(c.shape(), (1, 1), "convsdf channels must be scalars");
    }
    let n = x.value().rows();
    let ch_vals: Vec<f64> = channels.iter().map(|c| c.value().as_scalar()).collect();
    let mut out = Value::zeros(n, 1);
    for i in 0..n {
        let p = x.value().row3(i);
        let mut acc = 0.0;
        for (cell, w) in &stencil.cells {
            let q = p + Vector3::new(cell[0] as f64, cell[1] as f64, cell[2] as f64) * stencil.dilation;
            acc += w * objects.distance(q, &ch_vals);
        }
        out.data_mut()[i] = acc;
    }
    let tracked = x.is_tracked() || channels.iter().any(|c| c.is_tracked());
    let op = ConvSdfOp {
        x: x.node_id(),
        channels: channels.iter().map(|c| c.node_id()).collect(),
        x_val: x.value_rc(),
        ch_vals,
        objects: Rc::clone(objects),
        stencil: stencil.clone(),
    };
    x.tape().make_var(out, tracked, move || Box::new(op))
}

struct ConvSdfOp {
    x: Option<usize>,
    channels: Vec<Option<usize>>,
    x_val: Rc<Value>,
    ch_vals: Vec<f64>,
    objects: Rc<SdfObjectSet>,
    stencil: SdfStencil,
}

impl Backward for ConvSdfOp {
    fn backward(&self, out_grad: &Value, sink: &mut GradSink) {
        let n = self.x_val.rows();
        let any_channel = self.channels.iter().any(Option::is_some);
        let mut ch_grads = vec![0.0; self.ch_vals.len()];
        let mut gx = Value::zeros(n, 3);
        for i in 0..n {
            let go = out_grad.data()[i];
            if go == 0.0 {
                continue;
            }
            let p = self.x_val.row3(i);
            for (cell, w) in &self.stencil.cells {
                let q = p
                    + Vector3::new(cell[0] as f64, cell[1] as f64, cell[2] as f64)
                        * self.stencil.dilation;
                let Some(j) = self.objects.argmin(q, &self.ch_vals) else { continue };
                let (_, g_world) = self.objects.objects[j].distance_grad(
                    q,
                    &self.ch_vals,
                    &mut ch_grads,
                    if any_channel { go * w } else { 0.0 },
                );
                if self.x.is_some() {
                    let scaled = g_world * (go * w);
                    for a in 0..3 {
                        gx.data_mut()[i * 3 + a] += scaled[a];
                    }
                }
            }
        }
        if self.x.is_some() {
            sink.accum(self.x, &gx);
        }
        for (node, g) in self.channels.iter().zip(&ch_grads) {
            sink.accum(*node, &Value::scalar(*g));
        }
    }
}

/// One collision push-out pass: P' = P + relu(-sdf(P)) * n with n the
/// normalized axis-differenced field gradient. Returns the updated positions
/// and the count of particles whose differenced normal was degenerate (those
/// are left unmoved). Particles outside every object are returned bit-exact.
pub fn solve_object_collisions(
    p: &Var,
    channels: &[Var],
    objects: &Rc<SdfObjectSet>,
    dilation: f64,
) -> (Var, usize) {
    if objects.is_empty() {
        return (p.clone(), 0);
    }
    let depth = convsdf(p, channels, objects, &SdfStencil::center()).neg().relu();
    let mx = convsdf(p, channels, objects, &SdfStencil::axis_difference(0, dilation));
    let my = convsdf(p, channels, objects, &SdfStencil::axis_difference(1, dilation));
    let mz = convsdf(p, channels, objects, &SdfStencil::axis_difference(2, dilation));
    let m = concat3(&mx, &my, &mz);
    let (normal, degenerate) = row_normalize(&m, DEGENERATE_NORMAL_EPS);
    (p.add(&depth.mul(&normal)), degenerate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use approx::assert_relative_eq;

    fn floor_plane() -> SdfShape {
        SdfShape::Plane { normal: Unit::new_normalize(Vector3::y()), offset: 0.0 }
    }

    #[test]
    fn plane_and_sphere_distances() {
        let plane = floor_plane();
        assert_eq!(plane.distance(Vector3::new(5.0, 0.25, -3.0)), 0.25);
        assert_eq!(plane.distance(Vector3::new(0.0, -0.1, 0.0)), -0.1);
        let sphere = SdfShape::Sphere { radius: 0.5 };
        assert_relative_eq!(sphere.distance(Vector3::new(0.0, 1.0, 0.0)), 0.5);
        assert_relative_eq!(sphere.distance(Vector3::zeros()), -0.5);
    }

    /// Closest-point oracle for the box: clamp to the box for outside points,
    /// distance to the nearest face for inside points.
    fn box_oracle(p: Vector3<f64>, b: Vector3<f64>) -> f64 {
        let clamped = Vector3::new(p.x.clamp(-b.x, b.x), p.y.clamp(-b.y, b.y), p.z.clamp(-b.z, b.z));
        let outside = (p - clamped).norm();
        if outside > 0.0 {
            outside
        } else {
            -(0..3).map(|a| b[a] - p[a].abs()).fold(f64::INFINITY, f64::min)
        }
    }

    #[test]
    fn box_matches_closest_point_oracle() {
        let b = Vector3::new(0.3, 0.2, 0.5);
        let shape = SdfShape::Box { half_extents: b };
        let mut state = 42u64;
        let mut rnd = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 32) as f64) * 2.0 - 1.0
        };
        for _ in 0..500 {
            let p = Vector3::new(rnd(), rnd(), rnd());
            assert_relative_eq!(shape.distance(p), box_oracle(p, b), epsilon = 1e-12);
        }
    }

    #[test]
    fn cylinder_reference_points() {
        let shape = SdfShape::Cylinder { radius: 0.2, half_height: 0.1 };
        assert_relative_eq!(shape.distance(Vector3::new(0.3, 0.0, 0.0)), 0.1);
        assert_relative_eq!(shape.distance(Vector3::new(0.0, 0.25, 0.0)), 0.15);
        assert_relative_eq!(
            shape.distance(Vector3::new(0.3, 0.2, 0.0)),
            (0.1f64 * 0.1 + 0.1 * 0.1).sqrt()
        );
        assert_relative_eq!(shape.distance(Vector3::new(0.05, 0.0, 0.0)), -0.1);
        assert_relative_eq!(shape.distance(Vector3::new(0.19, 0.0, 0.0)), -0.01, epsilon = 1e-12);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let shapes = [
            floor_plane(),
            SdfShape::Sphere { radius: 0.3 },
            SdfShape::Box { half_extents: Vector3::new(0.3, 0.2, 0.5) },
            SdfShape::Cylinder { radius: 0.2, half_height: 0.15 },
        ];
        let points = [
            Vector3::new(0.4, 0.3, 0.1),
            Vector3::new(-0.1, 0.05, 0.2),
            Vector3::new(0.05, -0.04, 0.03),
            Vector3::new(-0.6, 0.5, -0.4),
        ];
        for shape in &shapes {
            for &p in &points {
                let g = shape.gradient(p);
                for a in 0..3 {
                    let mut pp = p;
                    pp[a] += 1e-7;
                    let mut pm = p;
                    pm[a] -= 1e-7;
                    let fd = (shape.distance(pp) - shape.distance(pm)) / 2e-7;
                    assert!((g[a] - fd).abs() < 1e-5, "{shape:?} at {p:?} axis {a}: {} vs {fd}", g[a]);
                }
            }
        }
    }

    #[test]
    fn grid_sdf_approximates_baked_sphere() {
        let grid = GridSdf::from_fn([21, 21, 21], 0.05, Vector3::new(-0.5, -0.5, -0.5), |p| {
            p.norm() - 0.3
        })
        .unwrap();
        for &p in &[Vector3::new(0.1, 0.05, -0.2), Vector3::new(0.33, 0.0, 0.0), Vector3::zeros()] {
            assert!((grid.distance(p) - (p.norm() - 0.3)).abs() < 5e-3);
        }
        // Outside the box: box distance plus clamped boundary sample.
        let far = Vector3::new(1.5, 0.0, 0.0);
        let expected = 1.0 + grid.distance(Vector3::new(0.5, 0.0, 0.0));
        assert_relative_eq!(grid.distance(far), expected, epsilon = 1e-12);
        // Generic points only: the trilinear derivative jumps across sample
        // planes, so FD probes must not straddle one.
        for &p in &[Vector3::new(0.12, 0.07, -0.18), Vector3::new(0.8, 0.31, 0.12)] {
            let g = grid.gradient(p);
            for a in 0..3 {
                let mut pp = p;
                pp[a] += 1e-7;
                let mut pm = p;
                pm[a] -= 1e-7;
                let fd = (grid.distance(pp) - grid.distance(pm)) / 2e-7;
                assert!((g[a] - fd).abs() < 1e-5, "grid grad at {p:?} axis {a}: {} vs {fd}", g[a]);
            }
        }
    }

    #[test]
    fn grid_sdf_file_round_trip() {
        let grid = GridSdf::from_fn([5, 4, 3], 0.1, Vector3::new(-0.2, 0.0, 0.3), |p| p.x + 2.0 * p.y - p.z)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.sdf");
        write_grid_sdf(&path, &grid).unwrap();
        let back = read_grid_sdf(&path).unwrap();
        assert_eq!(back.dims(), grid.dims());
        assert_eq!(back.cell(), grid.cell());
        assert_eq!(back.origin(), grid.origin());
        assert_eq!(back.samples(), grid.samples());
    }

    #[test]
    fn min_ties_go_to_lowest_index() {
        let set = SdfObjectSet::new(
            vec![
                PosedSdf::fixed(floor_plane(), RigidPose::identity()),
                PosedSdf::fixed(floor_plane(), RigidPose::identity()),
            ],
            0,
        );
        assert_eq!(set.argmin(Vector3::new(0.0, 0.5, 0.0), &[]), Some(0));
        let empty = SdfObjectSet::default();
        assert_eq!(empty.distance(Vector3::zeros(), &[]), f64::INFINITY);
        assert_eq!(empty.argmin(Vector3::zeros(), &[]), None);
    }

    #[test]
    fn axis_stencil_on_plane_gives_twice_dilation() {
        let tape = Tape::new();
        let set = Rc::new(SdfObjectSet::new(
            vec![PosedSdf::fixed(floor_plane(), RigidPose::identity())],
            0,
        ));
        let x = tape.constant(Value::from_vectors(&[
            Vector3::new(0.0, 0.5, 0.0),
            Vector3::new(1.0, -0.2, 3.0),
        ]));
        let d = 0.005;
        let out = convsdf(&x, &[], &set, &SdfStencil::axis_difference(1, d));
        assert_relative_eq!(out.value().data()[0], 2.0 * d, epsilon = 1e-15);
        assert_relative_eq!(out.value().data()[1], 2.0 * d, epsilon = 1e-15);
        let center = convsdf(&x, &[], &set, &SdfStencil::center());
        assert_eq!(center.value().data(), &[0.5, -0.2]);
    }

    #[test]
    fn collision_pushes_plane_penetrator_to_surface() {
        let tape = Tape::new();
        let set = Rc::new(SdfObjectSet::new(
            vec![PosedSdf::fixed(floor_plane(), RigidPose::identity())],
            0,
        ));
        let x = tape.constant(Value::from_vectors(&[
            Vector3::new(0.3, -0.02, 0.1),
            Vector3::new(0.0, 0.4, 0.0),
        ]));
        let (out, degenerate) = solve_object_collisions(&x, &[], &set, 0.005);
        assert_eq!(degenerate, 0);
        assert_relative_eq!(out.value().row3(0), Vector3::new(0.3, 0.0, 0.1), epsilon = 1e-12);
        // Non-penetrating particles come back bit-exact.
        assert_eq!(out.value().row3(1), Vector3::new(0.0, 0.4, 0.0));
    }

    #[test]
    fn collision_pushes_sphere_penetrator_radially() {
        let tape = Tape::new();
        let set = Rc::new(SdfObjectSet::new(
            vec![PosedSdf::fixed(SdfShape::Sphere { radius: 0.1 }, RigidPose::identity())],
            0,
        ));
        // On-axis start: the differenced normal is exactly radial.
        let x = tape.constant(Value::from_vectors(&[Vector3::new(0.07, 0.0, 0.0)]));
        let (out, _) = solve_object_collisions(&x, &[], &set, 0.005);
        let p = out.value().row3(0);
        assert_relative_eq!(p.norm(), 0.1, epsilon = 1e-6);
        assert_relative_eq!(p, Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-6);
    }

    #[test]
    fn repeated_collision_passes_resolve_deep_penetration() {
        let tape = Tape::new();
        let set = Rc::new(SdfObjectSet::new(
            vec![PosedSdf::fixed(SdfShape::Box { half_extents: Vector3::new(0.3, 0.3, 0.3) }, RigidPose::identity())],
            0,
        ));
        let mut x = tape.constant(Value::from_vectors(&[Vector3::new(0.02, 0.25, -0.07)]));
        let mut depth = set.max_penetration(x.value(), &[]);
        assert!(depth > 0.0);
        for _ in 0..12 {
            let (next, _) = solve_object_collisions(&x, &[], &set, 0.005);
            let new_depth = set.max_penetration(next.value(), &[]);
            assert!(new_depth <= depth * 0.5 + 1e-12, "penetration did not halve: {depth} -> {new_depth}");
            x = next;
            depth = new_depth;
            if depth < 1e-9 {
                break;
            }
        }
        assert!(depth < 1e-9, "penetration never resolved: {depth}");
    }

    #[test]
    fn channel_gradients_match_finite_differences() {
        // A box rotated about z through a pivot and translated along x by two
        // channels; check both partials against recomputing the forward.
        let shape = SdfShape::Box { half_extents: Vector3::new(0.3, 0.05, 0.3) };
        let base = RigidPose::from_translation(Vector3::new(0.1, 0.4, 0.0));
        let bindings = vec![
            Binding {
                channel: 0,
                motion: BindingMotion::RotateAboutAxis {
                    axis: Unit::new_normalize(Vector3::z()),
                    pivot: Vector3::new(0.1, 0.4, 0.0),
                },
            },
            Binding {
                channel: 1,
                motion: BindingMotion::TranslateAlongAxis { axis: Unit::new_normalize(Vector3::x()) },
            },
        ];
        let set = Rc::new(SdfObjectSet::new(
            vec![PosedSdf { shape, base, bindings }],
            2,
        ));
        let points = vec![
            Vector3::new(0.2, 0.52, 0.1),
            Vector3::new(-0.15, 0.3, -0.2),
            Vector3::new(0.1, 0.42, 0.0),
        ];
        let ch0 = 0.3;
        let ch1 = -0.07;
        let forward = |c0: f64, c1: f64, xv: &Value| -> f64 {
            let t = Tape::new();
            let x = t.constant(xv.clone());
            let a = t.scalar(c0);
            let b = t.scalar(c1);
            convsdf(&x, &[a, b], &set, &SdfStencil::center()).sum().scalar_value()
        };
        let x0 = Value::from_vectors(&points);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let c0 = tape.scalar_leaf(ch0);
        let c1 = tape.scalar_leaf(ch1);
        let loss = convsdf(&x, &[c0.clone(), c1.clone()], &set, &SdfStencil::center()).sum();
        let grads = tape.backward(&loss).unwrap();
        let eps = 1e-7;
        let fd0 = (forward(ch0 + eps, ch1, &x0) - forward(ch0 - eps, ch1, &x0)) / (2.0 * eps);
        let fd1 = (forward(ch0, ch1 + eps, &x0) - forward(ch0, ch1 - eps, &x0)) / (2.0 * eps);
        assert_relative_eq!(grads.wrt(&c0).as_scalar(), fd0, max_relative = 1e-5, epsilon = 1e-8);
        assert_relative_eq!(grads.wrt(&c1).as_scalar(), fd1, max_relative = 1e-5, epsilon = 1e-8);
        let gx = grads.wrt(&x);
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let fd = (forward(ch0, ch1, &xp) - forward(ch0, ch1, &xm)) / (2.0 * eps);
            let a = gx.data()[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-5, "gx[{i}]: {a} vs {fd}");
        }
    }

    #[test]
    fn local_point_inverts_the_binding_chain_and_bounds_cover_shapes() {
        // The same box-with-rotation-and-slide rig as the gradient test: a
        // world point constructed by pushing a local point out through the
        // pose chain must map back to it.
        let shape = SdfShape::Box { half_extents: Vector3::new(0.3, 0.05, 0.3) };
        let base = RigidPose::from_translation(Vector3::new(0.1, 0.4, 0.0));
        let posed = PosedSdf {
            shape: shape.clone(),
            base,
            bindings: vec![
                Binding {
                    channel: 0,
                    motion: BindingMotion::RotateAboutAxis {
                        axis: Unit::new_normalize(Vector3::z()),
                        pivot: Vector3::new(0.1, 0.4, 0.0),
                    },
                },
                Binding {
                    channel: 1,
                    motion: BindingMotion::TranslateAlongAxis {
                        axis: Unit::new_normalize(Vector3::x()),
                    },
                },
            ],
        };
        let channels = [0.4, -0.12];
        let local = Vector3::new(0.2, -0.03, 0.1);
        let mut world = base.transform_point(local);
        for b in &posed.bindings {
            world = b.transform(channels[b.channel]).transform_point(world);
        }
        let back = posed.local_point(world, &channels);
        assert_relative_eq!(back, local, epsilon = 1e-12);
        // distance() agrees with querying the shape at the mapped point.
        assert_relative_eq!(
            posed.distance(world, &channels),
            shape.distance(local),
            epsilon = 1e-12
        );
        // Bounds: the box reports its half extents, the plane is unbounded,
        // and a grid reports its sample box.
        assert_eq!(
            shape.local_bounds().unwrap(),
            (Vector3::new(-0.3, -0.05, -0.3), Vector3::new(0.3, 0.05, 0.3))
        );
        let plane = SdfShape::Plane { normal: Unit::new_normalize(Vector3::y()), offset: 0.0 };
        assert!(plane.local_bounds().is_none());
        let grid = GridSdf::from_fn([3, 4, 5], 0.5, Vector3::new(-1.0, 0.0, 2.0), |p| p.y).unwrap();
        let (lo, hi) = SdfShape::Grid(grid.into()).local_bounds().unwrap();
        assert_relative_eq!(lo, Vector3::new(-1.0, 0.0, 2.0), epsilon = 1e-15);
        assert_relative_eq!(hi, Vector3::new(0.0, 1.5, 4.0), epsilon = 1e-15);
    }

    #[test]
    fn collision_solve_gradient_matches_finite_differences() {
        let set = Rc::new(SdfObjectSet::new(
            vec![PosedSdf::fixed(SdfShape::Sphere { radius: 0.2 }, RigidPose::from_translation(Vector3::new(0.0, 0.1, 0.0)))],
            0,
        ));
        let points = vec![
            Vector3::new(0.13, 0.17, 0.04),
            Vector3::new(0.0, 0.45, 0.0),
            Vector3::new(-0.08, 0.03, 0.09),
        ];
        let x0 = Value::from_vectors(&points);
        let mut w = Value::zeros(3, 3);
        for i in 0..w.len() {
            w.data_mut()[i] = ((i * 7 + 2) % 5) as f64 * 0.25 - 0.5;
        }
        let forward = |xv: &Value| -> f64 {
            let t = Tape::new();
            let x = t.constant(xv.clone());
            let (out, _) = solve_object_collisions(&x, &[], &set, 0.005);
            out.mul(&t.constant(w.clone())).sum().scalar_value()
        };
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let (out, _) = solve_object_collisions(&x, &[], &set, 0.005);
        let loss = out.mul(&tape.constant(w.clone())).sum();
        let gx = tape.backward(&loss).unwrap().wrt(&x);
        for i in 0..x0.len() {
            let eps = 1e-7;
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let fd = (forward(&xp) - forward(&xm)) / (2.0 * eps);
            let a = gx.data()[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4, "gx[{i}]: {a} vs {fd}");
        }
    }
}
