//! Central finite-difference verification of every differentiable operation.
//!
//! Each row of the sweep rebuilds one small computation from a flat parameter
//! vector, compares the taped gradient of a scalar loss against central
//! finite differences component by component, and records the worst relative
//! error. Plain tape ops are held to a tighter tolerance than composed
//! multi-step rollouts, whose forward error accumulates.

use std::rc::Rc;

use nalgebra::{Unit, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::autodiff::{concat3, conv2d, row_normalize, Tape, Value, Var};
use crate::convsdf::{
    convsdf, solve_object_collisions, Binding, BindingMotion, PosedSdf, SdfObjectSet, SdfShape,
    SdfStencil,
};
use crate::convsp::{convsp_fresh, KernelKind};
use crate::pbf::{step, StepParams};
use crate::pose::RigidPose;
use crate::projection::{
    l1_state_loss, project_particles, projection_loss, splat_particles, CameraModel,
    ProjectionConfig,
};
use crate::state::{fill_box, FluidParams};
use crate::Error;

/// Tolerance for a single primitive op.
pub const SINGLE_OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for composed graphs (projection pipelines, multi-step rollouts).
pub const COMPOSED_TOLERANCE: f64 = 1e-4;

/// Relative error with an absolute floor so near-zero pairs compare cleanly.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Result of one sweep row.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    /// Worst relative error over the checked components.
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Number of components compared against finite differences.
    pub checks: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Full sweep outcome.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// Central-difference step for a component of magnitude `x`.
fn default_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Step proportional to the component itself, for parameters whose natural
/// scale is far below 1 (the fluid constants span 1e-9 to 1e2).
fn relative_step(x: f64) -> f64 {
    1e-4 * x.abs().max(1e-12)
}

/// Check one computation: `build` maps a flat parameter vector to a scalar
/// loss plus the tracked leaves (in the order their values tile the vector).
/// `sample` limits which components are finite-differenced; `None` checks all.
fn check_row(
    name: &str,
    tolerance: f64,
    base: &[f64],
    sample: Option<&[usize]>,
    step_of: fn(f64) -> f64,
    build: &dyn Fn(&[f64]) -> (Var, Vec<Var>),
) -> Result<CheckRow, Error> {
    let (loss, leaves) = build(base);
    let grads = loss.tape().backward(&loss)?;
    let mut analytic = Vec::with_capacity(base.len());
    for leaf in &leaves {
        analytic.extend_from_slice(grads.wrt(leaf).data());
    }
    assert_eq!(analytic.len(), base.len(), "{name}: leaves do not tile the parameter vector");

    let all: Vec<usize>;
    let indices = match sample {
        Some(s) => s,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };
    let mut worst = 0.0_f64;
    for &i in indices {
        let step = step_of(base[i]);
        let mut plus = base.to_vec();
        plus[i] += step;
        let mut minus = base.to_vec();
        minus[i] -= step;
        let fd = (build(&plus).0.scalar_value() - build(&minus).0.scalar_value()) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], fd));
    }
    Ok(CheckRow { name: name.into(), max_rel_err: worst, tolerance, checks: indices.len() })
}

fn uniform(rng: &mut StdRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// Values with |x| in [min_abs, max_abs] and random sign, clear of the kinks
/// of relu/abs/div at zero.
fn signed_away_from_zero(rng: &mut StdRng, n: usize, min_abs: f64, max_abs: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = min_abs + (max_abs - min_abs) * rng.random::<f64>();
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Random-weighted sum of a matrix output, so every entry's gradient is
/// distinct and nonzero.
fn weighted(out: &Var, weights: &[f64]) -> Var {
    let (r, c) = out.shape();
    assert_eq!(weights.len(), r * c);
    let w = out.tape().constant(Value::from_vec(r, c, weights.to_vec()));
    out.mul(&w).sum()
}

/// Elementwise-op row over a pair of 3x4 leaves.
fn binary_row(
    name: &str,
    a: &[f64],
    b: &[f64],
    b_shape: (usize, usize),
    w: &[f64],
    f: impl Fn(&Var, &Var) -> Var,
) -> Result<CheckRow, Error> {
    let mut base = a.to_vec();
    base.extend_from_slice(b);
    let a_len = a.len();
    let w = w.to_vec();
    check_row(name, SINGLE_OP_TOLERANCE, &base, None, default_step, &move |p: &[f64]| {
        let tape = Tape::new();
        let va = tape.leaf(Value::from_vec(3, 4, p[..a_len].to_vec()));
        let vb = tape.leaf(Value::from_vec(b_shape.0, b_shape.1, p[a_len..].to_vec()));
        (weighted(&f(&va, &vb), &w), vec![va, vb])
    })
}

/// Unary-op row over one 3x4 leaf.
fn unary_row(name: &str, a: &[f64], w: &[f64], f: impl Fn(&Var) -> Var) -> Result<CheckRow, Error> {
    let w = w.to_vec();
    check_row(name, SINGLE_OP_TOLERANCE, a, None, default_step, &move |p: &[f64]| {
        let tape = Tape::new();
        let va = tape.leaf(Value::from_vec(3, 4, p.to_vec()));
        (weighted(&f(&va), &w), vec![va])
    })
}

fn tape_op_rows(rows: &mut Vec<CheckRow>, rng: &mut StdRng) -> Result<(), Error> {
    let a = uniform(rng, 12, -1.0, 1.0);
    let b = uniform(rng, 12, -1.0, 1.0);
    let w = uniform(rng, 12, 0.5, 1.5);
    let scalar = uniform(rng, 1, 0.2, 0.8);
    let column = uniform(rng, 3, -1.0, 1.0);
    let row_vals = uniform(rng, 4, -1.0, 1.0);
    let denom = signed_away_from_zero(rng, 12, 0.4, 1.4);
    let kinked = signed_away_from_zero(rng, 12, 0.2, 1.0);

    rows.push(binary_row("add", &a, &b, (3, 4), &w, |x, y| x.add(y))?);
    rows.push(binary_row("add_broadcast_scalar", &a, &scalar, (1, 1), &w, |x, y| x.add(y))?);
    rows.push(binary_row("add_broadcast_column", &a, &column, (3, 1), &w, |x, y| x.add(y))?);
    rows.push(binary_row("add_broadcast_row", &a, &row_vals, (1, 4), &w, |x, y| x.add(y))?);
    rows.push(binary_row("sub", &a, &b, (3, 4), &w, |x, y| x.sub(y))?);
    rows.push(binary_row("mul", &a, &b, (3, 4), &w, |x, y| x.mul(y))?);
    rows.push(binary_row("mul_broadcast_column", &a, &column, (3, 1), &w, |x, y| x.mul(y))?);
    rows.push(binary_row("div", &a, &denom, (3, 4), &w, |x, y| x.div(y))?);
    rows.push(unary_row("scale", &a, &w, |x| x.scale(1.7))?);
    rows.push(unary_row("neg", &a, &w, |x| x.neg())?);
    rows.push(unary_row("affine", &a, &w, |x| x.affine(1.3, -0.4))?);
    rows.push(unary_row("relu", &kinked, &w, |x| x.relu())?);
    rows.push(unary_row("abs", &kinked, &w, |x| x.abs())?);
    rows.push(unary_row("tanh", &a, &w, |x| x.tanh())?);
    rows.push(unary_row("exp", &a, &w, |x| x.exp())?);
    rows.push(unary_row("sigmoid", &a, &w, |x| x.sigmoid())?);

    rows.push(check_row("sum", SINGLE_OP_TOLERANCE, &a, None, default_step, &|p| {
        let tape = Tape::new();
        let va = tape.leaf(Value::from_vec(3, 4, p.to_vec()));
        (va.sum(), vec![va])
    })?);
    rows.push(check_row("mean", SINGLE_OP_TOLERANCE, &a, None, default_step, &|p| {
        let tape = Tape::new();
        let va = tape.leaf(Value::from_vec(3, 4, p.to_vec()));
        (va.mean(), vec![va])
    })?);
    let wcol = uniform(rng, 3, 0.5, 1.5);
    rows.push(check_row("col", SINGLE_OP_TOLERANCE, &a, None, default_step, &move |p| {
        let tape = Tape::new();
        let va = tape.leaf(Value::from_vec(3, 4, p.to_vec()));
        (weighted(&va.col(2), &wcol), vec![va])
    })?);
    let wflat = uniform(rng, 12, 0.5, 1.5);
    rows.push(check_row("reshape", SINGLE_OP_TOLERANCE, &a, None, default_step, &move |p| {
        let tape = Tape::new();
        let va = tape.leaf(Value::from_vec(3, 4, p.to_vec()));
        (weighted(&va.reshape(2, 6), &wflat), vec![va])
    })?);

    let ma = uniform(rng, 12, -1.0, 1.0);
    let mb = uniform(rng, 8, -1.0, 1.0);
    let wmm = uniform(rng, 6, 0.5, 1.5);
    let mut base = ma.clone();
    base.extend_from_slice(&mb);
    rows.push(check_row("matmul", SINGLE_OP_TOLERANCE, &base, None, default_step, &move |p| {
        let tape = Tape::new();
        let va = tape.leaf(Value::from_vec(3, 4, p[..12].to_vec()));
        let vb = tape.leaf(Value::from_vec(4, 2, p[12..].to_vec()));
        (weighted(&va.matmul(&vb), &wmm), vec![va, vb])
    })?);

    let cols = uniform(rng, 15, -1.0, 1.0);
    let wcat = uniform(rng, 15, 0.5, 1.5);
    rows.push(check_row("concat3", SINGLE_OP_TOLERANCE, &cols, None, default_step, &move |p| {
        let tape = Tape::new();
        let x = tape.leaf(Value::from_vec(5, 1, p[..5].to_vec()));
        let y = tape.leaf(Value::from_vec(5, 1, p[5..10].to_vec()));
        let z = tape.leaf(Value::from_vec(5, 1, p[10..].to_vec()));
        (weighted(&concat3(&x, &y, &z), &wcat), vec![x, y, z])
    })?);

    // Rows with norms comfortably above the degeneracy epsilon.
    let mut dirs = Vec::with_capacity(15);
    for _ in 0..5 {
        let v = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        )
        .normalize()
            * (0.6 + 0.8 * rng.random::<f64>());
        dirs.extend_from_slice(&[v.x, v.y, v.z]);
    }
    let wnorm = uniform(rng, 15, 0.5, 1.5);
    rows.push(check_row("row_normalize", SINGLE_OP_TOLERANCE, &dirs, None, default_step, &move |p| {
        let tape = Tape::new();
        let va = tape.leaf(Value::from_vec(5, 3, p.to_vec()));
        (weighted(&row_normalize(&va, 1e-12).0, &wnorm), vec![va])
    })?);

    let img = uniform(rng, 30, -1.0, 1.0);
    let kw = uniform(rng, 8, -1.0, 1.0);
    let kb = uniform(rng, 2, -0.5, 0.5);
    let wconv = uniform(rng, 12, 0.5, 1.5);
    let mut base = img.clone();
    base.extend_from_slice(&kw);
    base.extend_from_slice(&kb);
    rows.push(check_row("conv2d", SINGLE_OP_TOLERANCE, &base, None, default_step, &move |p| {
        let tape = Tape::new();
        let vi = tape.leaf(Value::from_vec(6, 5, p[..30].to_vec()));
        let vw = tape.leaf(Value::from_vec(2, 4, p[30..38].to_vec()));
        let vb = tape.leaf(Value::from_vec(2, 1, p[38..].to_vec()));
        (weighted(&conv2d(&vi, &vw, &vb, 2, 2, 2), &wconv), vec![vi, vw, vb])
    })?);
    Ok(())
}

fn convsp_rows(rows: &mut Vec<CheckRow>, rng: &mut StdRng) -> Result<(), Error> {
    // Eight particles whose pairwise distances sit inside the kernel support
    // but away from both the singularity at zero and the cutoff.
    let n = 8;
    let h = 0.1;
    let positions = uniform(rng, 3 * n, 0.0, 0.13);
    let features = uniform(rng, n, 0.5, 1.5);
    let w = uniform(rng, n, 0.5, 1.5);
    let kernels = [
        ("convsp_density", KernelKind::Density, true),
        ("convsp_pressure", KernelKind::Pressure, false),
        ("convsp_pressure_over_d", KernelKind::PressureOverD, false),
        ("convsp_cohesion", KernelKind::Cohesion, false),
        ("convsp_cohesion_over_d", KernelKind::CohesionOverD, false),
        ("convsp_indicator", KernelKind::Indicator, false),
    ];
    for (name, kind, include_self) in kernels {
        let mut base = positions.clone();
        base.extend_from_slice(&features);
        base.push(h);
        let w = w.clone();
        rows.push(check_row(name, SINGLE_OP_TOLERANCE, &base, None, default_step, &move |p| {
            let tape = Tape::new();
            let x = tape.leaf(Value::from_vec(n, 3, p[..3 * n].to_vec()));
            let y = tape.leaf(Value::from_vec(n, 1, p[3 * n..4 * n].to_vec()));
            let hv = tape.scalar_leaf(p[4 * n]);
            let out = convsp_fresh(&x, &y, kind, &hv, include_self).expect("convsp");
            (weighted(&out, &w), vec![x, y, hv])
        })?);
    }

    // Multi-column features exercise the per-column adjoint paths.
    let features3 = uniform(rng, 3 * n, -1.0, 1.0);
    let w3 = uniform(rng, 3 * n, 0.5, 1.5);
    let mut base = positions.clone();
    base.extend_from_slice(&features3);
    rows.push(check_row(
        "convsp_density_features3",
        SINGLE_OP_TOLERANCE,
        &base,
        None,
        default_step,
        &move |p| {
            let tape = Tape::new();
            let x = tape.leaf(Value::from_vec(n, 3, p[..3 * n].to_vec()));
            let y = tape.leaf(Value::from_vec(n, 3, p[3 * n..].to_vec()));
            let hv = tape.scalar(h);
            let out = convsp_fresh(&x, &y, KernelKind::Density, &hv, true).expect("convsp");
            (weighted(&out, &w3), vec![x, y])
        },
    )?);
    Ok(())
}

fn static_scene() -> Rc<SdfObjectSet> {
    Rc::new(SdfObjectSet::new(
        vec![
            PosedSdf::fixed(
                SdfShape::Plane { normal: Unit::new_normalize(Vector3::y()), offset: 0.0 },
                RigidPose::identity(),
            ),
            PosedSdf::fixed(
                SdfShape::Sphere { radius: 0.3 },
                RigidPose::from_translation(Vector3::new(2.0, 0.4, 0.0)),
            ),
        ],
        0,
    ))
}

fn convsdf_rows(rows: &mut Vec<CheckRow>, rng: &mut StdRng) -> Result<(), Error> {
    // Probes split between the plane's and the sphere's attraction basins,
    // clear of the seam where the two distances tie.
    let objects = static_scene();
    let mut probes = Vec::new();
    for i in 0..10 {
        if i < 5 {
            probes.push(Vector3::new(
                0.4 * rng.random::<f64>() - 0.2,
                0.3 * rng.random::<f64>() + 0.05,
                0.4 * rng.random::<f64>() - 0.2,
            ));
        } else {
            let dir = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() + 0.2,
                rng.random::<f64>() - 0.5,
            )
            .normalize();
            probes.push(Vector3::new(2.0, 0.4, 0.0) + dir * (0.3 + 0.1 * rng.random::<f64>()));
        }
    }
    let base: Vec<f64> = probes.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let w = uniform(rng, probes.len(), 0.5, 1.5);
    let objects_row = Rc::clone(&objects);
    let wrow = w.clone();
    rows.push(check_row("convsdf_distance", SINGLE_OP_TOLERANCE, &base, None, default_step, &move |p| {
        let tape = Tape::new();
        let x = tape.leaf(Value::from_vec(p.len() / 3, 3, p.to_vec()));
        let out = convsdf(&x, &[], &objects_row, &SdfStencil::center());
        (weighted(&out, &wrow), vec![x])
    })?);

    // Pose channels: one rotating box, one translating sphere.
    let posed = Rc::new(SdfObjectSet::new(
        vec![
            PosedSdf {
                shape: SdfShape::Box { half_extents: Vector3::new(0.3, 0.2, 0.25) },
                base: RigidPose::from_translation(Vector3::new(0.0, 0.5, 0.0)),
                bindings: vec![Binding {
                    channel: 0,
                    motion: BindingMotion::RotateAboutAxis {
                        axis: Unit::new_normalize(Vector3::z()),
                        pivot: Vector3::new(0.0, 0.5, 0.0),
                    },
                }],
            },
            PosedSdf {
                shape: SdfShape::Sphere { radius: 0.25 },
                base: RigidPose::from_translation(Vector3::new(3.0, 0.5, 0.0)),
                bindings: vec![Binding {
                    channel: 1,
                    motion: BindingMotion::TranslateAlongAxis { axis: Unit::new_normalize(Vector3::x()) },
                }],
            },
        ],
        2,
    ));
    // Probes near each object's surface, in generic position so no distance
    // tie or box-edge crossing sits within the finite-difference step.
    let mut channel_probes = Vec::new();
    for i in 0..6 {
        if i < 3 {
            channel_probes.push(Vector3::new(
                0.45 * rng.random::<f64>(),
                0.5 + 0.4 * (rng.random::<f64>() - 0.5),
                0.3 * rng.random::<f64>(),
            ));
        } else {
            channel_probes.push(Vector3::new(
                3.0 + 0.5 * (rng.random::<f64>() - 0.5),
                0.5 + 0.5 * (rng.random::<f64>() - 0.5),
                0.4 * (rng.random::<f64>() - 0.5),
            ));
        }
    }
    let probe_value = Value::from_vectors(&channel_probes);
    let wch = uniform(rng, channel_probes.len(), 0.5, 1.5);
    rows.push(check_row(
        "convsdf_pose_channels",
        SINGLE_OP_TOLERANCE,
        &[0.3, -0.2],
        None,
        default_step,
        &move |p| {
            let tape = Tape::new();
            let x = tape.constant(probe_value.clone());
            let c0 = tape.scalar_leaf(p[0]);
            let c1 = tape.scalar_leaf(p[1]);
            let out = convsdf(&x, &[c0.clone(), c1.clone()], &posed, &SdfStencil::center());
            (weighted(&out, &wch), vec![c0, c1])
        },
    )?);

    // Collision push-out: half the particles penetrate, half stay clear.
    let objects_solve = static_scene();
    let mut solve_probes = Vec::new();
    for i in 0..10 {
        let x = 0.6 * rng.random::<f64>() - 0.3;
        let z = 0.6 * rng.random::<f64>() - 0.3;
        let y = if i % 2 == 0 {
            -0.08 + 0.06 * rng.random::<f64>()
        } else {
            0.05 + 0.3 * rng.random::<f64>()
        };
        solve_probes.push(Vector3::new(x, y, z));
    }
    let base: Vec<f64> = solve_probes.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let wsolve = uniform(rng, base.len(), 0.5, 1.5);
    rows.push(check_row("collision_solve", SINGLE_OP_TOLERANCE, &base, None, default_step, &move |p| {
        let tape = Tape::new();
        let x = tape.leaf(Value::from_vec(p.len() / 3, 3, p.to_vec()));
        let (resolved, _) = solve_object_collisions(&x, &[], &objects_solve, 0.005);
        (weighted(&resolved, &wsolve), vec![x])
    })?);
    Ok(())
}

fn projection_rows(rows: &mut Vec<CheckRow>, rng: &mut StdRng) -> Result<(), Error> {
    let camera = CameraModel::centered(40.0, 40.0, 33, 25, RigidPose::identity());
    let config = ProjectionConfig { sigma: 2.0, beta: 4.0, occlusion: false };
    let n = 3;
    let mut base = Vec::new();
    for _ in 0..n {
        base.push(0.6 * rng.random::<f64>() - 0.3);
        base.push(0.6 * rng.random::<f64>() - 0.3);
        base.push(1.5 + rng.random::<f64>());
    }

    let cam = camera.clone();
    let cfg = config;
    rows.push(check_row("projection_splat", COMPOSED_TOLERANCE, &base, None, default_step, &move |p| {
        let tape = Tape::new();
        let x = tape.leaf(Value::from_vec(n, 3, p.to_vec()));
        (splat_particles(&x, &cam, &cfg, None).sum(), vec![x])
    })?);

    // Loss against the projection of a shifted cloud, so no pixel difference
    // sits exactly at the abs kink.
    let truth = {
        let tape = Tape::new();
        let shifted: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 3 == 2 { *v } else { v + 0.04 })
            .collect();
        let x = tape.constant(Value::from_vec(n, 3, shifted));
        project_particles(&x, &camera, &config, None).value().clone()
    };
    let cam = camera.clone();
    rows.push(check_row("projection_loss", COMPOSED_TOLERANCE, &base, None, default_step, &move |p| {
        let tape = Tape::new();
        let x = tape.leaf(Value::from_vec(n, 3, p.to_vec()));
        let pred = project_particles(&x, &cam, &cfg, None);
        let truth_var = tape.constant(truth.clone());
        (projection_loss(&pred, &truth_var).expect("projection_loss"), vec![x])
    })?);

    let m = 4;
    let truth_p = Value::from_vec(m, 3, uniform(rng, 3 * m, -0.5, 0.5));
    let truth_v = Value::from_vec(m, 3, uniform(rng, 3 * m, -0.5, 0.5));
    let base = uniform(rng, 6 * m, 0.6, 1.6);
    rows.push(check_row("state_l1_loss", COMPOSED_TOLERANCE, &base, None, default_step, &move |p| {
        let tape = Tape::new();
        let pp = tape.leaf(Value::from_vec(m, 3, p[..3 * m].to_vec()));
        let pv = tape.leaf(Value::from_vec(m, 3, p[3 * m..].to_vec()));
        (l1_state_loss(&pp, &pv, &truth_p, &truth_v).expect("l1_state_loss"), vec![pp, pv])
    })?);
    Ok(())
}

/// A three-step rollout builder over the flat vector
/// [lambda x4, P0 x3n, V0 x3n, channel].
fn rollout_build(
    fluid: FluidParams,
    masses: Vec<f64>,
    objects: Rc<SdfObjectSet>,
    weights: Vec<f64>,
) -> impl Fn(&[f64]) -> (Var, Vec<Var>) {
    let n = masses.len();
    move |p: &[f64]| {
        let tape = Tape::new();
        let lvars = [
            tape.scalar_leaf(p[0]),
            tape.scalar_leaf(p[1]),
            tape.scalar_leaf(p[2]),
            tape.scalar_leaf(p[3]),
        ];
        let params = StepParams::with_lambda_vars(&tape, &fluid, &masses, lvars.clone());
        let pos = tape.leaf(Value::from_vec(n, 3, p[4..4 + 3 * n].to_vec()));
        let vel = tape.leaf(Value::from_vec(n, 3, p[4 + 3 * n..4 + 6 * n].to_vec()));
        let channel = tape.scalar_leaf(p[4 + 6 * n]);
        let (mut pv, mut vv) = (pos.clone(), vel.clone());
        for _ in 0..3 {
            let (p1, v1, _) =
                step(&pv, &vv, &params, &objects, std::slice::from_ref(&channel)).expect("step");
            pv = p1;
            vv = v1;
        }
        let wv = tape.constant(Value::from_vec(n, 3, weights.clone()));
        let loss = pv.mul(&wv).sum().add(&vv.mul(&wv).sum().scale(0.05));
        let mut leaves = lvars.to_vec();
        leaves.push(pos);
        leaves.push(vel);
        leaves.push(channel);
        (loss, leaves)
    }
}

fn rollout_rows(rows: &mut Vec<CheckRow>, rng: &mut StdRng) -> Result<(), Error> {
    let fluid = FluidParams::default();
    let s = fluid.rest_spacing();
    let lambdas =
        [fluid.lambda_pressure, fluid.lambda_cohesion, fluid.lambda_surface, fluid.lambda_viscosity];

    // Scene one: a mid-air compressed 3x3x3 blob with no colliders. The
    // compression keeps the density constraint active so all four force
    // paths carry gradient, and the absence of contact keeps the graph
    // smooth around the base point.
    let spacing = 0.75 * s;
    let blob = fill_box(
        Vector3::new(0.0, 0.5, 0.0),
        Vector3::new(2.0 * spacing, 0.5 + 2.0 * spacing, 2.0 * spacing),
        spacing,
        fluid.particle_mass,
    )?;
    let n = blob.len();
    let free = Rc::new(SdfObjectSet::new(Vec::new(), 1));
    let mut base = lambdas.to_vec();
    base.extend(blob.positions.iter().flat_map(|p| [p.x, p.y, p.z]));
    base.extend(uniform(rng, 3 * n, -0.05, 0.05));
    base.push(0.0);
    let weights = uniform(rng, 3 * n, 0.5, 1.5);
    let build = rollout_build(fluid, blob.masses.clone(), free, weights);

    // The fluid constants span nine orders of magnitude, so their steps are
    // proportional.
    rows.push(check_row(
        "pbf_rollout3_fluid_constants",
        COMPOSED_TOLERANCE,
        &base,
        Some(&[0, 1, 2, 3]),
        relative_step,
        &build,
    )?);
    let state_sample = [
        4 + 1,
        4 + 3 * (n / 2),
        4 + 3 * n - 2,
        4 + 3 * n + 2,
        4 + 3 * n + 3 * (n / 3) + 1,
        4 + 6 * n - 1,
    ];
    rows.push(check_row(
        "pbf_rollout3_state",
        COMPOSED_TOLERANCE,
        &base,
        Some(&state_sample),
        default_step,
        &build,
    )?);

    // Scene two: a flat rest-spaced sheet that lands on a channel-driven
    // floor plane during the third step, so the collision branch and the
    // pose channel carry gradient. The sheet stays flat, which keeps the
    // push-out exact and the landing transversal.
    let sheet = fill_box(
        Vector3::new(0.0, 0.012, 0.0),
        Vector3::new(2.0 * s, 0.012, 2.0 * s),
        s,
        fluid.particle_mass,
    )?;
    let m = sheet.len();
    let floor = Rc::new(SdfObjectSet::new(
        vec![PosedSdf {
            shape: SdfShape::Plane { normal: Unit::new_normalize(Vector3::y()), offset: 0.0 },
            base: RigidPose::identity(),
            bindings: vec![Binding {
                channel: 0,
                motion: BindingMotion::TranslateAlongAxis { axis: Unit::new_normalize(Vector3::y()) },
            }],
        }],
        1,
    ));
    let mut contact_base = lambdas.to_vec();
    contact_base.extend(sheet.positions.iter().flat_map(|p| [p.x, p.y, p.z]));
    // Horizontal-only initial velocities keep every particle at the same
    // height through the landing.
    for _ in 0..m {
        contact_base.push(0.02 * (rng.random::<f64>() - 0.5));
        contact_base.push(0.0);
        contact_base.push(0.02 * (rng.random::<f64>() - 0.5));
    }
    contact_base.push(0.0);
    let contact_weights = uniform(rng, 3 * m, 0.5, 1.5);
    let contact_build = rollout_build(fluid, sheet.masses.clone(), floor, contact_weights);
    let contact_sample = [4, 4 + 1, 4 + 3 * (m / 2), 4 + 3 * m - 1, 4 + 3 * m, 4 + 4 * m + 2];
    rows.push(check_row(
        "pbf_rollout3_contact_state",
        COMPOSED_TOLERANCE,
        &contact_base,
        Some(&contact_sample),
        default_step,
        &contact_build,
    )?);
    rows.push(check_row(
        "pbf_rollout3_collider_channel",
        COMPOSED_TOLERANCE,
        &contact_base,
        Some(&[4 + 6 * m]),
        default_step,
        &contact_build,
    )?);
    Ok(())
}

/// The default sweep: every primitive op, each smoothing kernel, signed
/// distances and pose channels, the collision solve, the projection pipeline
/// and both losses, and a three-step solver rollout.
pub fn default_sweep() -> Result<CheckReport, Error> {
    // Each family draws from its own stream so editing one family cannot
    // reshuffle another's base points.
    let mut rows = Vec::new();
    tape_op_rows(&mut rows, &mut StdRng::seed_from_u64(11))?;
    convsp_rows(&mut rows, &mut StdRng::seed_from_u64(12))?;
    convsdf_rows(&mut rows, &mut StdRng::seed_from_u64(13))?;
    projection_rows(&mut rows, &mut StdRng::seed_from_u64(14))?;
    rollout_rows(&mut rows, &mut StdRng::seed_from_u64(15))?;
    Ok(CheckReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_symmetric_with_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), relative_error(1.0, 2.0));
        assert!(relative_error(1e-9, 0.0) < 1e-2);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn default_sweep_passes_everywhere() {
        let report = default_sweep().unwrap();
        assert!(report.rows.len() >= 30, "sweep shrank to {} rows", report.rows.len());
        for row in &report.rows {
            assert!(
                row.passed(),
                "{}: max rel err {} over {} checks exceeds {}",
                row.name,
                row.max_rel_err,
                row.checks,
                row.tolerance
            );
        }
        assert!(report.passed());
    }

    #[test]
    fn sweep_covers_every_contract_area() {
        let report = default_sweep().unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
        for needed in [
            "matmul",
            "conv2d",
            "convsp_density",
            "convsp_pressure_over_d",
            "convsdf_distance",
            "convsdf_pose_channels",
            "collision_solve",
            "projection_splat",
            "projection_loss",
            "state_l1_loss",
            "pbf_rollout3_fluid_constants",
            "pbf_rollout3_state",
            "pbf_rollout3_collider_channel",
        ] {
            assert!(names.contains(&needed), "missing row {needed}");
        }
    }
}

