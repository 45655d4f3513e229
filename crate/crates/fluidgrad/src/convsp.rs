//! Smoothing-kernel particle convolution and the kernel family it uses.
//!
//! [`convsp`] computes, for every particle i, the kernel-weighted sum of a
//! per-particle feature over i's neighbors: out_i = sum_j y_j W(d_ij, h).
//! It is recorded on the tape with analytic adjoints with respect to the
//! positions, the features, and the support radius, which is what makes the
//! whole fluid step differentiable.

use std::rc::Rc;

use rayon::prelude::*;

use crate::autodiff::{Backward, GradSink, Value, Var};
use crate::neighbors::NeighborGrid;
use crate::Error;

/// Rest-spacing fraction baked into the cohesion kernel shape.
pub const COHESION_D0: f64 = 0.5;

/// Particle count above which convsp loops run in parallel over centers.
const PARALLEL_MIN_PARTICLES: usize = 512;

/// The kernel family. All kernels have support radius `h` and are zero for
/// d > h. The `OverD` variants divide by the pair distance and are defined as
/// zero at d = 0, which is what makes unit-vector-weighted sums expressible
/// as plain feature convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// (15 / pi h^3) (1 - d/h)^2; used for densities and viscosity.
    Density,
    /// (30 / pi h^4) (1 - d/h); spiky kernel used for pressure.
    Pressure,
    /// Pressure kernel divided by d.
    PressureOverD,
    /// Cubic cohesion kernel: negative at contact, zero near the rest
    /// distance, positive toward the cutoff.
    Cohesion,
    /// Cohesion kernel divided by d.
    CohesionOverD,
    /// 1 inside the support, 0 outside.
    Indicator,
}

#[inline]
pub fn kernel_density(d: f64, h: f64) -> f64 {
    if d > h {
        return 0.0;
    }
    let t = 1.0 - d / h;
    15.0 / (std::f64::consts::PI * h * h * h) * t * t
}

#[inline]
pub fn kernel_pressure(d: f64, h: f64) -> f64 {
    if d > h {
        return 0.0;
    }
    30.0 / (std::f64::consts::PI * h * h * h * h) * (1.0 - d / h)
}

#[inline]
pub fn kernel_pressure_over_d(d: f64, h: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    kernel_pressure(d, h) / d
}

#[inline]
pub fn kernel_cohesion(d: f64, h: f64) -> f64 {
    if d > h {
        return 0.0;
    }
    let d0 = COHESION_D0;
    let a = -(1.0 - d0) / (d0 * d0);
    let b = (d0 * d0 + d0 + 1.0) / (d0 * d0);
    let t = d / h;
    a * t * t * t + b * t * t - 1.0
}

#[inline]
pub fn kernel_cohesion_over_d(d: f64, h: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    kernel_cohesion(d, h) / d
}

#[inline]
fn kernel_indicator(d: f64, h: f64) -> f64 {
    if d <= h {
        1.0
    } else {
        0.0
    }
}

/// Kernel value. `d` inside the support is assumed; values beyond `h` are 0.
#[inline]
pub(crate) fn kernel_value(kind: KernelKind, d: f64, h: f64) -> f64 {
    match kind {
        KernelKind::Density => kernel_density(d, h),
        KernelKind::Pressure => kernel_pressure(d, h),
        KernelKind::PressureOverD => kernel_pressure_over_d(d, h),
        KernelKind::Cohesion => kernel_cohesion(d, h),
        KernelKind::CohesionOverD => kernel_cohesion_over_d(d, h),
        KernelKind::Indicator => kernel_indicator(d, h),
    }
}

/// dW/dd. Zero at d = 0 by the same convention as the OverD values.
#[inline]
pub(crate) fn kernel_ddist(kind: KernelKind, d: f64, h: f64) -> f64 {
    if d > h {
        return 0.0;
    }
    let pi = std::f64::consts::PI;
    match kind {
        KernelKind::Density => -30.0 / (pi * h.powi(4)) * (1.0 - d / h),
        KernelKind::Pressure => -30.0 / (pi * h.powi(5)),
        KernelKind::PressureOverD => {
            if d == 0.0 {
                0.0
            } else {
                -30.0 / (pi * h.powi(4) * d * d)
            }
        }
        KernelKind::Cohesion => {
            let d0 = COHESION_D0;
            let a = -(1.0 - d0) / (d0 * d0);
            let b = (d0 * d0 + d0 + 1.0) / (d0 * d0);
            let t = d / h;
            (3.0 * a * t * t + 2.0 * b * t) / h
        }
        KernelKind::CohesionOverD => {
            if d == 0.0 {
                0.0
            } else {
                (kernel_ddist(KernelKind::Cohesion, d, h) * d - kernel_cohesion(d, h)) / (d * d)
            }
        }
        KernelKind::Indicator => 0.0,
    }
}

/// dW/dh at fixed d.
#[inline]
pub(crate) fn kernel_dh(kind: KernelKind, d: f64, h: f64) -> f64 {
    if d > h {
        return 0.0;
    }
    let pi = std::f64::consts::PI;
    let t = d / h;
    match kind {
        KernelKind::Density => 15.0 / (pi * h.powi(4)) * (1.0 - t) * (5.0 * t - 3.0),
        KernelKind::Pressure => 30.0 / (pi * h.powi(5)) * (5.0 * t - 4.0),
        KernelKind::PressureOverD => {
            if d == 0.0 {
                0.0
            } else {
                30.0 / (pi * h.powi(6)) * (5.0 - 4.0 * h / d)
            }
        }
        KernelKind::Cohesion => -t * kernel_ddist(KernelKind::Cohesion, d, h),
        KernelKind::CohesionOverD => {
            if d == 0.0 {
                0.0
            } else {
                kernel_dh(KernelKind::Cohesion, d, h) / d
            }
        }
        KernelKind::Indicator => 0.0,
    }
}

/// Validated kernel evaluation for external callers.
pub fn eval_kernel(kind: KernelKind, d: f64, h: f64) -> Result<f64, Error> {
    if !(d.is_finite() && d >= 0.0) {
        return Err(Error::invalid(format!("kernel distance must be finite and >= 0, got {d}")));
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("kernel radius must be finite and > 0, got {h}")));
    }
    Ok(kernel_value(kind, d, h))
}

/// Smoothing-kernel convolution of per-particle features, recorded on the
/// tape. `x` is Nx3, `y` is NxF; the result is NxF with
/// out_i = sum over neighbors j (plus i itself when `include_self`) of
/// y_j W(d_ij, h). The neighbor grid must have been built from `x`'s exact
/// value snapshot with radius equal to `h`.
pub fn convsp(
    x: &Var,
    y: &Var,
    kind: KernelKind,
    h: &Var,
    include_self: bool,
    grid: &Rc<NeighborGrid>,
) -> Var {
    assert_eq!(x.value().cols(), 3, "convsp positions must be Nx3");
    let n = x.value().rows();
    assert_eq!(y.value().rows(), n, "convsp features must have one row per particle");
    assert!(
        Rc::ptr_eq(grid.positions_rc(), &x.value_rc()),
        "convsp: neighbor grid was built from a different position snapshot"
    );
    let h_val = h.value().as_scalar();
    assert_eq!(grid.h(), h_val, "convsp: neighbor grid radius {} != h {h_val}", grid.h());

    let f = y.value().cols();
    let y_data = y.value().data();
    let w_self = if include_self { kernel_value(kind, 0.0, h_val) } else { 0.0 };
    let (offsets, nbrs_all, dists_all) = grid.csr();

    let row_out = move |i: usize, out: &mut [f64]| {
        let (lo, hi) = (offsets[i], offsets[i + 1]);
        if include_self {
            for c in 0..f {
                out[c] = w_self * y_data[i * f + c];
            }
        }
        for (&j, &d) in nbrs_all[lo..hi].iter().zip(&dists_all[lo..hi]) {
            let w = kernel_value(kind, d, h_val);
            if w != 0.0 {
                let yj = &y_data[j as usize * f..j as usize * f + f];
                for c in 0..f {
                    out[c] += w * yj[c];
                }
            }
        }
    };

    let mut out = Value::zeros(n, f);
    if n >= PARALLEL_MIN_PARTICLES {
        out.data_mut().par_chunks_mut(f).enumerate().for_each(|(i, chunk)| row_out(i, chunk));
    } else {
        for (i, chunk) in out.data_mut().chunks_mut(f).enumerate() {
            row_out(i, chunk);
        }
    }

    let tracked = x.is_tracked() || y.is_tracked() || h.is_tracked();
    let op = ConvSpOp {
        x: x.node_id(),
        y: y.node_id(),
        h: h.node_id(),
        x_val: x.value_rc(),
        y_val: y.value_rc(),
        h_val,
        kind,
        include_self,
        grid: Rc::clone(grid),
    };
    x.tape().make_var(out, tracked, move || Box::new(op))
}

/// Convenience wrapper that builds the neighbor grid itself.
pub fn convsp_fresh(x: &Var, y: &Var, kind: KernelKind, h: &Var, include_self: bool) -> Result<Var, Error> {
    let grid = Rc::new(NeighborGrid::build(x.value_rc(), h.value().as_scalar())?);
    Ok(convsp(x, y, kind, h, include_self, &grid))
}

struct ConvSpOp {
    x: Option<usize>,
    y: Option<usize>,
    h: Option<usize>,
    x_val: Rc<Value>,
    y_val: Rc<Value>,
    h_val: f64,
    kind: KernelKind,
    include_self: bool,
    grid: Rc<NeighborGrid>,
}

impl Backward for ConvSpOp {
    fn backward(&self, out_grad: &Value, sink: &mut GradSink) {
        let n = self.x_val.rows();
        let f = self.y_val.cols();
        let (offsets, nbrs_all, dists_all) = self.grid.csr();
        let x_data = self.x_val.data();
        let y_data = self.y_val.data();
        let g_data = out_grad.data();
        let (kind, h, include_self) = (self.kind, self.h_val, self.include_self);

        if self.y.is_some() {
            // d out_k / d y_i is W(d_ki) whenever i neighbors k; by symmetry
            // each center can gather its own feature gradient.
            let w_self = if include_self { kernel_value(kind, 0.0, h) } else { 0.0 };
            let gy = sink.slot(self.y, n, f).unwrap();
            let row = move |i: usize, out: &mut [f64]| {
                let (lo, hi) = (offsets[i], offsets[i + 1]);
                if include_self {
                    for c in 0..f {
                        out[c] += w_self * g_data[i * f + c];
                    }
                }
                for (&j, &d) in nbrs_all[lo..hi].iter().zip(&dists_all[lo..hi]) {
                    let w = kernel_value(kind, d, h);
                    if w != 0.0 {
                        for c in 0..f {
                            out[c] += w * g_data[j as usize * f + c];
                        }
                    }
                }
            };
            if n >= PARALLEL_MIN_PARTICLES {
                gy.data_mut().par_chunks_mut(f).enumerate().for_each(|(i, chunk)| row(i, chunk));
            } else {
                for (i, chunk) in gy.data_mut().chunks_mut(f).enumerate() {
                    row(i, chunk);
                }
            }
        }

        if self.x.is_some() {
            // d W(d_ij)/d x_i = W'(d_ij) (x_i - x_j)/d_ij; particle i picks up
            // a term as the center (g_i . y_j) and one as the neighbor
            // (g_j . y_i) of each pair.
            let gx = sink.slot(self.x, n, 3).unwrap();
            let row = move |i: usize, out: &mut [f64]| {
                let (lo, hi) = (offsets[i], offsets[i + 1]);
                let xi = [x_data[i * 3], x_data[i * 3 + 1], x_data[i * 3 + 2]];
                for (&j, &d) in nbrs_all[lo..hi].iter().zip(&dists_all[lo..hi]) {
                    if d == 0.0 {
                        continue;
                    }
                    let j = j as usize;
                    let dw = kernel_ddist(kind, d, h);
                    if dw == 0.0 {
                        continue;
                    }
                    let mut gi_yj = 0.0;
                    let mut gj_yi = 0.0;
                    for c in 0..f {
                        gi_yj += g_data[i * f + c] * y_data[j * f + c];
                        gj_yi += g_data[j * f + c] * y_data[i * f + c];
                    }
                    let scale = (gi_yj + gj_yi) * dw / d;
                    for a in 0..3 {
                        out[a] += scale * (xi[a] - x_data[j * 3 + a]);
                    }
                }
            };
            if n >= PARALLEL_MIN_PARTICLES {
                gx.data_mut().par_chunks_mut(3).enumerate().for_each(|(i, chunk)| row(i, chunk));
            } else {
                for (i, chunk) in gx.data_mut().chunks_mut(3).enumerate() {
                    row(i, chunk);
                }
            }
        }

        if self.h.is_some() {
            let mut gh = 0.0;
            for i in 0..n {
                if include_self {
                    let dwh = kernel_dh(kind, 0.0, h);
                    if dwh != 0.0 {
                        for c in 0..f {
                            gh += g_data[i * f + c] * y_data[i * f + c] * dwh;
                        }
                    }
                }
                let (lo, hi) = (offsets[i], offsets[i + 1]);
                for (&j, &d) in nbrs_all[lo..hi].iter().zip(&dists_all[lo..hi]) {
                    let dwh = kernel_dh(kind, d, h);
                    if dwh != 0.0 {
                        let j = j as usize;
                        for c in 0..f {
                            gh += g_data[i * f + c] * y_data[j * f + c] * dwh;
                        }
                    }
                }
            }
            sink.accum(self.h, &Value::scalar(gh));
        }
    }
}

/// Brute-force O(N^2) reference for [`convsp`]. Test oracle; no tape.
pub fn convsp_reference(
    x: &Value,
    y: &Value,
    kind: KernelKind,
    h: f64,
    include_self: bool,
) -> Value {
    let n = x.rows();
    let f = y.cols();
    let mut out = Value::zeros(n, f);
    for i in 0..n {
        for j in 0..n {
            if j == i && !include_self {
                continue;
            }
            let d = (x.row3(i) - x.row3(j)).norm();
            if d > h {
                continue;
            }
            let w = kernel_value(kind, d, h);
            for c in 0..f {
                let v = out.get(i, c) + w * y.get(j, c);
                out.set(i, c, v);
            }
        }
    }
    out
}
