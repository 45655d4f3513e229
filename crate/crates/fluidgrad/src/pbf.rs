//! The differentiable position-based fluid timestep.
//!
//! One [`step`] runs: gravity, position prediction, a fixed number of
//! constraint iterations (pressure + cohesion + surface tension applied
//! together, then collision resolution), the velocity update
//! V' = (P' - P) / dt, and finally viscosity smoothing of the new
//! velocities. Every stage is built from tape ops, so a rollout of steps can
//! be differentiated with respect to the fluid constants, the initial state,
//! and any collider control channels.
//!
//! The particle-particle corrections are each expressed as combinations of a
//! handful of [`convsp`] calls rather than explicit pair loops; the
//! identities are checked against direct pairwise sums in the tests.

use std::rc::Rc;

use nalgebra::Vector3;

use crate::autodiff::{Tape, Value, Var};
use crate::convsdf::{solve_object_collisions, SdfObjectSet};
use crate::convsp::{convsp, kernel_value, KernelKind};
use crate::neighbors::NeighborGrid;
use crate::state::FluidParams;
use crate::Error;

/// Per-tape handles to everything a step needs besides the state itself.
/// The four fluid constants and the smoothing radius are `Var`s so callers
/// can make any of them tracked leaves (parameter estimation differentiates
/// through them); [`StepParams::constants`] builds the plain untracked form.
pub struct StepParams {
    pub lambda_pressure: Var,
    pub lambda_cohesion: Var,
    pub lambda_surface: Var,
    pub lambda_viscosity: Var,
    pub smoothing_h: Var,
    /// Per-particle masses, Nx1.
    pub masses: Var,
    pub rest_density: f64,
    pub gravity: Vector3<f64>,
    pub dt: f64,
    pub solver_iters: usize,
    pub collision_dilation: f64,
}

impl StepParams {
    /// All-constant parameters for plain simulation.
    pub fn constants(tape: &Tape, fluid: &FluidParams, masses: &[f64]) -> Self {
        let lambdas = [
            tape.scalar(fluid.lambda_pressure),
            tape.scalar(fluid.lambda_cohesion),
            tape.scalar(fluid.lambda_surface),
            tape.scalar(fluid.lambda_viscosity),
        ];
        Self::with_lambda_vars(tape, fluid, masses, lambdas)
    }

    /// Parameters with caller-supplied fluid-constant vars (in the order
    /// pressure, cohesion, surface, viscosity), e.g. tracked leaves or
    /// exp-of-leaf nodes.
    pub fn with_lambda_vars(tape: &Tape, fluid: &FluidParams, masses: &[f64], lambdas: [Var; 4]) -> Self {
        let [lambda_pressure, lambda_cohesion, lambda_surface, lambda_viscosity] = lambdas;
        Self {
            lambda_pressure,
            lambda_cohesion,
            lambda_surface,
            lambda_viscosity,
            smoothing_h: tape.scalar(fluid.cutoff_h),
            masses: tape.constant(Value::from_column(masses)),
            rest_density: fluid.rest_density,
            gravity: fluid.gravity_vec(),
            dt: fluid.dt,
            solver_iters: fluid.solver_iters,
            collision_dilation: fluid.collision_dilation,
        }
    }

    fn ones(&self, n: usize) -> Var {
        self.masses.tape().constant(Value::full(n, 1, 1.0))
    }
}

/// Health counters for one step. All entries are finite and non-negative.
#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    /// max(rho - rho0, 0) over particles, measured on the final positions.
    pub max_density_overshoot: f64,
    /// Deepest collider penetration of the final positions.
    pub max_penetration: f64,
    /// Largest single-particle correction applied by each constraint, over
    /// all solver iterations.
    pub max_pressure_correction: f64,
    pub max_cohesion_correction: f64,
    pub max_surface_correction: f64,
    /// Largest viscosity velocity change.
    pub max_viscosity_delta: f64,
    /// Largest |sum over particles| component of any particle-particle
    /// correction; nonzero only through rounding.
    pub momentum_residual: f64,
    /// Particles left unmoved by collision resolution because their
    /// differenced normal had (near-)zero length.
    pub degenerate_normals: usize,
}

/// V' = V + g dt.
pub fn apply_forces(velocities: &Var, gravity: Vector3<f64>, dt: f64) -> Var {
    let g = velocities.tape().constant(Value::from_vec(
        1,
        3,
        vec![gravity.x * dt, gravity.y * dt, gravity.z * dt],
    ));
    velocities.add(&g)
}

/// P' = P + V' dt.
pub fn predict_positions(positions: &Var, velocities: &Var, dt: f64) -> Var {
    positions.add(&velocities.scale(dt))
}

/// Per-particle pressure omega = lambda_p relu(rho - rho0), with the density
/// rho from the mass convolution (self term included).
pub fn compute_pressures(positions: &Var, params: &StepParams, grid: &Rc<NeighborGrid>) -> Var {
    let rho = convsp(positions, &params.masses, KernelKind::Density, &params.smoothing_h, true, grid);
    rho.affine(1.0, -params.rest_density).relu().mul(&params.lambda_pressure)
}

/// Pressure position correction sum_(j != i) (p_i - p_j)(w_i + w_j) Wp/d,
/// assembled from four convolutions of the pressure-over-distance kernel:
/// P.W.C(1) + P.C(W) - W.C(P) - C(P.W).
pub fn solve_pressure(positions: &Var, omega: &Var, params: &StepParams, grid: &Rc<NeighborGrid>) -> Var {
    let kind = KernelKind::PressureOverD;
    let h = &params.smoothing_h;
    let ones = params.ones(positions.value().rows());
    let c_one = convsp(positions, &ones, kind, h, false, grid);
    let c_omega = convsp(positions, omega, kind, h, false, grid);
    let c_pos = convsp(positions, positions, kind, h, false, grid);
    let c_pos_omega = convsp(positions, &positions.mul(omega), kind, h, false, grid);
    positions
        .mul(omega)
        .mul(&c_one)
        .add(&positions.mul(&c_omega))
        .sub(&omega.mul(&c_pos))
        .sub(&c_pos_omega)
}

/// K_i = sum_(j != i) (p_j - p_i) Wc(d_ij)/d_ij — the cohesion direction sum,
/// which doubles as the surface-normal field.
fn direction_sum(positions: &Var, params: &StepParams, grid: &Rc<NeighborGrid>) -> Var {
    let kind = KernelKind::CohesionOverD;
    let h = &params.smoothing_h;
    let ones = params.ones(positions.value().rows());
    let c_pos = convsp(positions, positions, kind, h, false, grid);
    let c_one = convsp(positions, &ones, kind, h, false, grid);
    c_pos.sub(&positions.mul(&c_one))
}

/// Cohesion correction lambda_c K dt^2. Negative kernel values at short
/// range push particles apart, positive values toward the rest distance pull
/// them together. lambda_c K is acceleration-scale (the kernel is O(1) per
/// neighbor), so one dt^2 integrates it to a per-iteration position
/// correction; without it the documented lambda_c range produces corrections
/// larger than the smoothing radius and the solve diverges.
pub fn solve_cohesion(positions: &Var, params: &StepParams, grid: &Rc<NeighborGrid>) -> Var {
    direction_sum(positions, params, grid)
        .mul(&params.lambda_cohesion)
        .scale(params.dt * params.dt)
}

/// Surface-tension correction (lambda_s / rho0) sum_(j != i) (n_j - n_i)
/// over neighbors, with n the direction-sum normal field.
pub fn solve_surface_tension(positions: &Var, params: &StepParams, grid: &Rc<NeighborGrid>) -> Var {
    let normals = direction_sum(positions, params, grid);
    surface_from_normals(positions, &normals, params, grid)
}

fn surface_from_normals(positions: &Var, normals: &Var, params: &StepParams, grid: &Rc<NeighborGrid>) -> Var {
    let h = &params.smoothing_h;
    let ones = params.ones(positions.value().rows());
    let c_n = convsp(positions, normals, KernelKind::Indicator, h, false, grid);
    let c_one = convsp(positions, &ones, KernelKind::Indicator, h, false, grid);
    c_n.sub(&normals.mul(&c_one))
        .mul(&params.lambda_surface.scale(1.0 / params.rest_density))
}

/// Viscosity velocity change (lambda_v dt / rho0) sum_(j != i)
/// m_j (v_j - v_i) W_rho(d_ij) over neighbors of the final positions.
/// lambda_v is a smoothing rate: the mass-weighted kernel sum against rho0
/// makes the bracket a neighborhood velocity average, and dt converts the
/// rate into a per-step blend. The blend stays below the stability bound of
/// 2 for lambda_v up to ~160 at the default step size; the raw unintegrated
/// sum would diverge for any lambda_v above ~0.3.
pub fn apply_viscosity(positions: &Var, velocities: &Var, params: &StepParams, grid: &Rc<NeighborGrid>) -> Var {
    let h = &params.smoothing_h;
    let c_vm = convsp(positions, &velocities.mul(&params.masses), KernelKind::Density, h, false, grid);
    let c_m = convsp(positions, &params.masses, KernelKind::Density, h, false, grid);
    c_vm.sub(&velocities.mul(&c_m))
        .mul(&params.lambda_viscosity.scale(params.dt / params.rest_density))
}

/// max(rho - rho0, 0) over particles, computed without the tape.
pub fn density_overshoot(positions: Rc<Value>, masses: &Value, h: f64, rest_density: f64) -> Result<f64, Error> {
    let n = positions.rows();
    let grid = NeighborGrid::build(Rc::clone(&positions), h)?;
    let w0 = kernel_value(KernelKind::Density, 0.0, h);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut rho = masses.data()[i] * w0;
        for (&j, &d) in grid.neighbors(i).iter().zip(grid.distances(i)) {
            rho += masses.data()[j as usize] * kernel_value(KernelKind::Density, d, h);
        }
        worst = worst.max(rho - rest_density);
    }
    Ok(worst.max(0.0))
}

fn ensure_finite(v: &Value, stage: &str) -> Result<(), Error> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite values after {stage}")))
    }
}

/// Largest row euclidean norm of an Nx3 value.
fn max_row_norm(v: &Value) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..v.rows() {
        worst = worst.max(v.row3(i).norm());
    }
    worst
}

/// Largest |column sum| of an Nx3 value.
fn max_column_sum(v: &Value) -> f64 {
    let mut sums = [0.0f64; 3];
    for i in 0..v.rows() {
        for (a, s) in sums.iter_mut().enumerate() {
            *s += v.get(i, a);
        }
    }
    sums.iter().fold(0.0f64, |m, s| m.max(s.abs()))
}

/// One full fluid timestep. Returns the new positions and velocities (both
/// on the tape) plus diagnostics. Fails with a numeric error naming the
/// first stage that produced non-finite values.
pub fn step(
    positions: &Var,
    velocities: &Var,
    params: &StepParams,
    objects: &Rc<SdfObjectSet>,
    channels: &[Var],
) -> Result<(Var, Var, StepDiagnostics), Error> {
    let h_val = params.smoothing_h.value().as_scalar();
    let mut diag = StepDiagnostics::default();

    let v_pred = apply_forces(velocities, params.gravity, params.dt);
    ensure_finite(v_pred.value(), "apply_forces")?;
    let mut p = predict_positions(positions, &v_pred, params.dt);
    ensure_finite(p.value(), "predict_positions")?;

    for iter in 0..params.solver_iters {
        let grid = Rc::new(
            NeighborGrid::build(p.value_rc(), h_val)
                .map_err(|e| Error::numeric(format!("neighbor grid, solver iteration {iter}: {e}")))?,
        );
        let omega = compute_pressures(&p, params, &grid);
        ensure_finite(omega.value(), "compute_pressures")?;
        let dp_pressure = solve_pressure(&p, &omega, params, &grid);
        ensure_finite(dp_pressure.value(), "solve_pressure")?;
        let normals = direction_sum(&p, params, &grid);
        let dp_cohesion = normals.mul(&params.lambda_cohesion).scale(params.dt * params.dt);
        ensure_finite(dp_cohesion.value(), "solve_cohesion")?;
        let dp_surface = surface_from_normals(&p, &normals, params, &grid);
        ensure_finite(dp_surface.value(), "solve_surface_tension")?;

        diag.max_pressure_correction = diag.max_pressure_correction.max(max_row_norm(dp_pressure.value()));
        diag.max_cohesion_correction = diag.max_cohesion_correction.max(max_row_norm(dp_cohesion.value()));
        diag.max_surface_correction = diag.max_surface_correction.max(max_row_norm(dp_surface.value()));
        diag.momentum_residual = diag
            .momentum_residual
            .max(max_column_sum(dp_pressure.value()))
            .max(max_column_sum(dp_cohesion.value()))
            .max(max_column_sum(dp_surface.value()));

        p = p.add(&dp_pressure).add(&dp_cohesion).add(&dp_surface);
        ensure_finite(p.value(), "constraint corrections")?;
        let (resolved, degenerate) = solve_object_collisions(&p, channels, objects, params.collision_dilation);
        ensure_finite(resolved.value(), "solve_object_collisions")?;
        diag.degenerate_normals += degenerate;
        p = resolved;
    }

    let v_new = p.sub(positions).scale(1.0 / params.dt);
    ensure_finite(v_new.value(), "velocity update")?;
    let grid = Rc::new(
        NeighborGrid::build(p.value_rc(), h_val)
            .map_err(|e| Error::numeric(format!("neighbor grid, viscosity: {e}")))?,
    );
    let dv = apply_viscosity(&p, &v_new, params, &grid);
    ensure_finite(dv.value(), "apply_viscosity")?;
    diag.max_viscosity_delta = max_row_norm(dv.value());
    let v_final = v_new.add(&dv);

    diag.max_density_overshoot =
        density_overshoot(p.value_rc(), params.masses.value(), h_val, params.rest_density)?;
    let ch_vals: Vec<f64> = channels.iter().map(|c| c.value().as_scalar()).collect();
    diag.max_penetration = objects.max_penetration(p.value(), &ch_vals);
    Ok((p, v_final, diag))
}
