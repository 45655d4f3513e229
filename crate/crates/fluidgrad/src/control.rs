//! Gradient-based control of fluid scenes: task losses, receding-horizon
//! planning, and a learned visual policy.
//!
//! [`scene_loss`] evaluates a scene's task objective on the differentiable
//! graph, so its gradient reaches the control channels. [`mpc_rollout_grad`]
//! unrolls the simulator over a control window and returns the gradient of
//! the summed objective with respect to every window control;
//! [`mpc_drive`] replans with one normalized window update per frame,
//! executes the first control, and reports task metrics. [`Policy`] is a
//! small convolutional network mapping rendered particle images to a bounded
//! control rate, trained by [`train_policy`] with backpropagation through the
//! simulated rollout.

use std::io::{BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use nalgebra::{Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv2d, Tape, Value, Var};
use crate::convsdf::{BindingMotion, PosedSdf};
use crate::estimation::{adam_step, AdamState, OptimConfig};
use crate::gradcheck::relative_error;
use crate::io::{read_csv, CsvWriter};
use crate::pbf::{step, StepParams};
use crate::pose::RigidPose;
use crate::projection::{project_particles, CameraModel, ProjectionConfig};
use crate::scene::{LossSpec, Scene};
use crate::state::ParticleState;
use crate::Error;

/// Margin added around a cup's local bounding region when deciding whether a
/// particle has left it (meters).
pub const CUP_REGION_DILATION: f64 = 0.01;

/// Relative tolerance of the finite-difference spot checks run in test mode.
pub const SPOT_CHECK_TOLERANCE: f64 = 1e-3;

/// Components this small on both sides are skipped by spot checks.
const SPOT_CHECK_FLOOR: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Receding-horizon planner settings. The planner replans on every frame:
/// one normalized gradient update of the whole window, then the first
/// control executes and the window shifts.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    /// Planning horizon in frames.
    pub horizon: usize,
    /// Length of one normalized window update, per window index.
    pub step_size: f64,
    /// Per-component control bound; updated controls clamp to `[-bound, bound]`.
    pub bound: f64,
    /// Probability per frame of finite-difference checking one window
    /// gradient component (0 disables; tests enable).
    pub spot_check_probability: f64,
    /// Seed for the spot-check sampler.
    pub seed: u64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self { horizon: 10, step_size: 0.05, bound: 1.0, spot_check_probability: 0.0, seed: 0 }
    }
}

impl MpcConfig {
    /// Defaults with the bound taken from the scene.
    pub fn for_scene(scene: &Scene) -> Self {
        Self { bound: scene.control_bound, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.horizon == 0 {
            return Err(Error::invalid("mpc horizon must be at least 1 frame"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::invalid(format!(
                "mpc step size must be finite and > 0, got {}",
                self.step_size
            )));
        }
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::invalid(format!(
                "mpc control bound must be finite and > 0, got {}",
                self.bound
            )));
        }
        if !(0.0..=1.0).contains(&self.spot_check_probability) {
            return Err(Error::invalid(format!(
                "spot check probability must lie in [0, 1], got {}",
                self.spot_check_probability
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Task losses
// ---------------------------------------------------------------------------

fn object_index(scene: &Scene, name: &str, what: &str) -> Result<usize, Error> {
    scene
        .object_index(name)
        .ok_or_else(|| Error::invalid(format!("{what}: no object named {name:?} in scene {:?}", scene.spec.name)))
}

/// Axis of the translation binding driving `channel` on object `index`.
fn translation_axis(scene: &Scene, index: usize, channel: usize) -> Result<Unit<Vector3<f64>>, Error> {
    scene.objects[index]
        .bindings
        .iter()
        .find_map(|b| match &b.motion {
            BindingMotion::TranslateAlongAxis { axis } if b.channel == channel => Some(*axis),
            _ => None,
        })
        .ok_or_else(|| {
            Error::invalid(format!(
                "object {:?} has no translation binding on channel {channel}",
                scene.objects[index].name
            ))
        })
}

/// The object's posed collider at a frame (keyframed base plus bindings).
fn posed_object(scene: &Scene, index: usize, frame: f64) -> PosedSdf {
    let o = &scene.objects[index];
    PosedSdf { shape: o.shape.clone(), base: o.pose_at(frame), bindings: o.bindings.clone() }
}

/// Fraction of particles outside the cup's local bounding region, dilated by
/// [`CUP_REGION_DILATION`]. This is the poured-mass measure: liquid still
/// held by the cup stays inside the region under any cup pose, while liquid
/// that escaped maps far outside it.
pub fn poured_fraction(
    scene: &Scene,
    cup_object: usize,
    positions: &[Vector3<f64>],
    channels: &[f64],
    frame: f64,
) -> Result<f64, Error> {
    if positions.is_empty() {
        return Ok(0.0);
    }
    let posed = posed_object(scene, cup_object, frame);
    let (lo, hi) = posed
        .shape
        .local_bounds()
        .ok_or_else(|| Error::invalid("poured-mass region needs a bounded cup shape"))?;
    let lo = lo - Vector3::repeat(CUP_REGION_DILATION);
    let hi = hi + Vector3::repeat(CUP_REGION_DILATION);
    let outside = positions
        .iter()
        .filter(|&&p| {
            let l = posed.local_point(p, channels);
            (0..3).any(|a| l[a] < lo[a] || l[a] > hi[a])
        })
        .count();
    Ok(outside as f64 / positions.len() as f64)
}

/// Tracks the pouring task's permanent phase switch: once the poured
/// fraction reaches the target, the task stays in phase 2 even if the
/// measured fraction later dips.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PourPhase {
    switched: bool,
}

impl PourPhase {
    /// Feed one poured-fraction observation; returns the phase-2 flag.
    pub fn observe(&mut self, fraction: f64, target: f64) -> bool {
        if fraction >= target {
            self.switched = true;
        }
        self.switched
    }

    pub fn in_phase2(&self) -> bool {
        self.switched
    }
}

/// Mean-squared particle distance to a fixed world point.
fn mean_squared_distance(positions: &Var, point: [f64; 3]) -> Var {
    let n = positions.value().rows();
    let target = positions.tape().constant(Value::from_vec(1, 3, point.to_vec()));
    let diff = positions.sub(&target);
    diff.mul(&diff).sum().scale(1.0 / n as f64)
}

/// A scene's task objective at one frame, on the graph.
///
/// - Plate: mean squared particle distance to the target point.
/// - Pour, phase 1: mean squared particle distance to the lip point;
///   phase 2 (`pour_phase2` set): squared value of the rotation channel, so
///   the planner rights the cup.
/// - Catch: mean of |x_p - x_center| / (1 + c max(0, y_top - y_p)), with
///   x_center following the cup's translation channel on the graph and
///   y_top the cup's base height plus the rim height.
pub fn scene_loss(
    scene: &Scene,
    positions: &Var,
    channels: &[Var],
    frame: f64,
    pour_phase2: bool,
) -> Result<Var, Error> {
    let spec = scene.loss.as_ref().ok_or_else(|| {
        Error::invalid(format!("scene {:?} declares no task loss", scene.spec.name))
    })?;
    let n = positions.value().rows();
    if n == 0 {
        return Err(Error::invalid("task loss needs at least one particle"));
    }
    match spec {
        LossSpec::Plate { target } => Ok(mean_squared_distance(positions, *target)),
        LossSpec::Pour { lip_point, rotation_channel, .. } => {
            let rc = *rotation_channel;
            if rc >= channels.len() {
                return Err(Error::invalid(format!(
                    "pour loss rotation channel {rc} out of range ({} channels)",
                    channels.len()
                )));
            }
            if pour_phase2 {
                Ok(channels[rc].mul(&channels[rc]))
            } else {
                Ok(mean_squared_distance(positions, *lip_point))
            }
        }
        LossSpec::Catch { cup_object, translation_channel, rim_height, weight_c } => {
            let tc = *translation_channel;
            if tc >= channels.len() {
                return Err(Error::invalid(format!(
                    "catch loss translation channel {tc} out of range ({} channels)",
                    channels.len()
                )));
            }
            let cup = object_index(scene, cup_object, "catch loss")?;
            let axis = translation_axis(scene, cup, tc)?;
            let base = scene.objects[cup].pose_at(frame).translation();
            // Cup centerline x, connected to the channel on the graph.
            let x_center = channels[tc].affine(axis.x, base.x);
            let y_top = base.y + rim_height;
            let dx = positions.col(0).sub(&x_center).abs();
            let depth = positions.col(1).affine(-1.0, y_top).relu();
            let weight = depth.scale(*weight_c).affine(1.0, 1.0);
            Ok(dx.div(&weight).sum().scale(1.0 / n as f64))
        }
    }
}

// ---------------------------------------------------------------------------
// Receding-horizon planning
// ---------------------------------------------------------------------------

/// Simulation state carried across planner frames.
#[derive(Debug, Clone)]
pub struct MpcState {
    pub positions: Value,
    pub velocities: Value,
    pub channels: Vec<f64>,
    /// Index of the frame this state represents.
    pub frame: usize,
    pub pour: PourPhase,
}

impl MpcState {
    /// The scene's initial fluid at frame 0 with neutral channels.
    pub fn initial(scene: &Scene) -> Self {
        Self {
            positions: Value::from_vectors(&scene.fluid.positions),
            velocities: Value::from_vectors(&scene.fluid.velocities),
            channels: scene.initial_channels(),
            frame: 0,
            pour: PourPhase::default(),
        }
    }
}

/// The pour task's cup index and target fraction, when the scene poses one.
fn pour_target(scene: &Scene) -> Result<Option<(usize, f64)>, Error> {
    match &scene.loss {
        Some(LossSpec::Pour { cup_object, target_fraction, .. }) => {
            let cup = object_index(scene, cup_object, "pour loss")?;
            Ok(Some((cup, *target_fraction)))
        }
        _ => Ok(None),
    }
}

/// Unroll the window, returning the summed loss and (optionally) its
/// gradient with respect to each window control component.
fn rollout_window(
    scene: &Scene,
    state: &MpcState,
    controls: &[Vec<f64>],
    want_grads: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>), Error> {
    if controls.is_empty() {
        return Err(Error::invalid("mpc window must contain at least one control"));
    }
    if controls.iter().any(|row| row.len() != scene.channel_count) {
        return Err(Error::invalid(format!(
            "window controls must have {} component(s)",
            scene.channel_count
        )));
    }
    if state.positions.rows() != scene.fluid.masses.len() {
        return Err(Error::invalid(format!(
            "state has {} particles but the scene declares {}",
            state.positions.rows(),
            scene.fluid.masses.len()
        )));
    }
    let dt = scene.params.dt;
    let tape = Tape::new();
    let params = StepParams::constants(&tape, &scene.params, &scene.fluid.masses);
    let mut p = tape.constant(state.positions.clone());
    let mut v = tape.constant(state.velocities.clone());
    let mut c_vars: Vec<Var> = state.channels.iter().map(|&c| tape.scalar(c)).collect();
    let leaves: Vec<Vec<Var>> = controls
        .iter()
        .map(|row| {
            row.iter()
                .map(|&u| if want_grads { tape.scalar_leaf(u) } else { tape.scalar(u) })
                .collect()
        })
        .collect();
    let pour = pour_target(scene)?;
    let mut phase = state.pour;
    let mut total: Option<Var> = None;
    for (t, u_row) in leaves.iter().enumerate() {
        let frame = (state.frame + t + 1) as f64;
        for (c, u) in c_vars.iter_mut().zip(u_row) {
            *c = c.add(&u.scale(dt));
        }
        let objects = Rc::new(scene.objects_at(frame));
        let (p2, v2, _) = step(&p, &v, &params, &objects, &c_vars)
            .map_err(|e| e.prefixed(&format!("mpc window step to frame {frame}")))?;
        p = p2;
        v = v2;
        let phase2 = match pour {
            Some((cup, target)) if !phase.in_phase2() => {
                let ch: Vec<f64> = c_vars.iter().map(Var::scalar_value).collect();
                let frac = poured_fraction(scene, cup, &p.value().to_vectors(), &ch, frame)?;
                phase.observe(frac, target)
            }
            _ => phase.in_phase2(),
        };
        let l = scene_loss(scene, &p, &c_vars, frame, phase2)?;
        total = Some(match total {
            None => l,
            Some(acc) => acc.add(&l),
        });
    }
    let total = total.expect("window is non-empty");
    let loss = total.scalar_value();
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "mpc window loss diverged planning from frame {}",
            state.frame
        )));
    }
    if !want_grads {
        return Ok((loss, None));
    }
    let grads = tape.backward(&total)?;
    let out = leaves
        .iter()
        .map(|row| row.iter().map(|u| grads.wrt(u).as_scalar()).collect())
        .collect();
    Ok((loss, Some(out)))
}

/// Summed window loss and its gradient per window control component.
///
/// Step `t` of the window applies control `controls[t]` to the channels
/// (`c += u dt`) and advances one frame; the losses of all predicted frames
/// are summed. Controls the loss does not depend on get exact zeros.
pub fn mpc_rollout_grad(
    scene: &Scene,
    state: &MpcState,
    controls: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>), Error> {
    let (loss, grads) = rollout_window(scene, state, controls, true)?;
    Ok((loss, grads.expect("gradients were requested")))
}

/// One normalized gradient update of the window: each window index with a
/// nonzero gradient moves exactly `step_size` against its normalized
/// gradient, then clamps to the control bound; zero-gradient indices stay
/// put.
pub fn update_window(controls: &mut [Vec<f64>], grads: &[Vec<f64>], config: &MpcConfig) {
    for (u, g) in controls.iter_mut().zip(grads) {
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            continue;
        }
        for (uc, gc) in u.iter_mut().zip(g) {
            *uc = (*uc - config.step_size * gc / norm).clamp(-config.bound, config.bound);
        }
    }
}

/// Advance the live state one frame under `control` (no gradients), and
/// evaluate the executed frame's loss.
fn advance_state(scene: &Scene, state: &MpcState, control: &[f64]) -> Result<(MpcState, f64), Error> {
    let dt = scene.params.dt;
    let frame = (state.frame + 1) as f64;
    let channels: Vec<f64> =
        state.channels.iter().zip(control).map(|(c, u)| c + u * dt).collect();
    let tape = Tape::new();
    let params = StepParams::constants(&tape, &scene.params, &scene.fluid.masses);
    let p = tape.constant(state.positions.clone());
    let v = tape.constant(state.velocities.clone());
    let c_vars: Vec<Var> = channels.iter().map(|&c| tape.scalar(c)).collect();
    let objects = Rc::new(scene.objects_at(frame));
    let (p2, v2, _) = step(&p, &v, &params, &objects, &c_vars)
        .map_err(|e| e.prefixed(&format!("executing frame {frame}")))?;
    let mut pour = state.pour;
    if let Some((cup, target)) = pour_target(scene)? {
        let frac = poured_fraction(scene, cup, &p2.value().to_vectors(), &channels, frame)?;
        pour.observe(frac, target);
    }
    let loss = scene_loss(scene, &p2, &c_vars, frame, pour.in_phase2())?.scalar_value();
    let next = MpcState {
        positions: p2.value().clone(),
        velocities: v2.value().clone(),
        channels,
        frame: state.frame + 1,
        pour,
    };
    Ok((next, loss))
}

/// End-of-run task measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskMetrics {
    /// Fraction of particles whose horizontal displacement from the plate
    /// pivot points within 45 degrees of the direction toward the target.
    Plate { sector_fraction: f64, direction: [f64; 3] },
    /// Fraction of particles outside the cup's dilated bounding region.
    Pour { poured_fraction: f64, target_fraction: f64 },
    /// Fraction of particles inside the target cup's inner cavity.
    Catch { caught_fraction: f64 },
}

/// Evaluate the scene's task metric on a final particle configuration.
pub fn task_metrics(
    scene: &Scene,
    positions: &[Vector3<f64>],
    channels: &[f64],
    frame: f64,
) -> Result<TaskMetrics, Error> {
    let spec = scene.loss.as_ref().ok_or_else(|| {
        Error::invalid(format!("scene {:?} declares no task loss", scene.spec.name))
    })?;
    if positions.is_empty() {
        return Err(Error::invalid("task metrics need at least one particle"));
    }
    match spec {
        LossSpec::Plate { target } => {
            let pivot = scene
                .objects
                .iter()
                .flat_map(|o| o.bindings.iter())
                .find_map(|b| match &b.motion {
                    BindingMotion::RotateAboutAxis { pivot, .. } => Some(*pivot),
                    _ => None,
                })
                .ok_or_else(|| Error::invalid("plate metric needs a rotation-bound object"))?;
            let mut dir = Vector3::from(*target) - pivot;
            dir.y = 0.0;
            if dir.norm() == 0.0 {
                return Err(Error::invalid("plate target sits directly above the pivot"));
            }
            let dir = dir.normalize();
            let in_sector = positions
                .iter()
                .filter(|&&p| {
                    let mut d = p - pivot;
                    d.y = 0.0;
                    let n = d.norm();
                    n > 1e-9 && d.dot(&dir) / n >= std::f64::consts::FRAC_1_SQRT_2
                })
                .count();
            Ok(TaskMetrics::Plate {
                sector_fraction: in_sector as f64 / positions.len() as f64,
                direction: [dir.x, dir.y, dir.z],
            })
        }
        LossSpec::Pour { cup_object, target_fraction, .. } => {
            let cup = object_index(scene, cup_object, "pour metric")?;
            let fraction = poured_fraction(scene, cup, positions, channels, frame)?;
            Ok(TaskMetrics::Pour { poured_fraction: fraction, target_fraction: *target_fraction })
        }
        LossSpec::Catch { cup_object, .. } => {
            let cup = object_index(scene, cup_object, "catch metric")?;
            let crate::scene::ShapeSpec::Cup { inner_radius, inner_depth, base, .. } =
                &scene.spec.objects[cup].shape
            else {
                return Err(Error::invalid("catch metric needs a cup-shaped target object"));
            };
            let posed = posed_object(scene, cup, frame);
            let caught = positions
                .iter()
                .filter(|&&p| {
                    let l = posed.local_point(p, channels);
                    let r = (l.x * l.x + l.z * l.z).sqrt();
                    r <= *inner_radius && l.y >= *base && l.y <= base + inner_depth
                })
                .count();
            Ok(TaskMetrics::Catch { caught_fraction: caught as f64 / positions.len() as f64 })
        }
    }
}

/// A completed planner run: the executed trajectory, controls, channel
/// values, per-frame losses, and the final task metric.
#[derive(Debug, Clone)]
pub struct MpcRun {
    /// States per frame, `duration + 1` entries starting at the initial fluid.
    pub frames: Vec<ParticleState>,
    /// Executed control per frame, `duration` entries.
    pub controls: Vec<Vec<f64>>,
    /// Channel values per frame, `duration + 1` entries starting at zero.
    pub channels: Vec<Vec<f64>>,
    /// Executed loss after each frame, `duration` entries.
    pub losses: Vec<f64>,
    pub metrics: TaskMetrics,
    /// Frame at which the pouring task switched to phase 2, if it did.
    pub pour_phase2_at: Option<usize>,
}

/// Finite-difference check of one randomly chosen window gradient component.
fn spot_check_window(
    scene: &Scene,
    state: &MpcState,
    window: &[Vec<f64>],
    grads: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<(), Error> {
    let t = rng.random_range(0..window.len());
    let c = rng.random_range(0..window[t].len());
    let h = 1e-6 * window[t][c].abs().max(1.0);
    let mut plus = window.to_vec();
    plus[t][c] += h;
    let mut minus = window.to_vec();
    minus[t][c] -= h;
    let (lp, _) = rollout_window(scene, state, &plus, false)?;
    let (lm, _) = rollout_window(scene, state, &minus, false)?;
    let fd = (lp - lm) / (2.0 * h);
    let a = grads[t][c];
    if a.abs().max(fd.abs()) > SPOT_CHECK_FLOOR && relative_error(a, fd) > SPOT_CHECK_TOLERANCE {
        return Err(Error::numeric(format!(
            "window gradient spot check failed at frame {}: control[{t}][{c}] analytic {a} vs finite difference {fd}",
            state.frame
        )));
    }
    Ok(())
}

/// Drive the scene with receding-horizon planning.
///
/// Per frame: one gradient evaluation of the current window, one normalized
/// window update, execution of the first control, then a one-frame window
/// shift (the vacated tail control initializes to zero). Runs for the
/// scene's full duration and reports the task metric on the final frame.
pub fn mpc_drive(scene: &Scene, config: &MpcConfig) -> Result<MpcRun, Error> {
    config.validate()?;
    if scene.loss.is_none() {
        return Err(Error::invalid(format!("scene {:?} declares no task loss", scene.spec.name)));
    }
    if scene.fluid.positions.is_empty() {
        return Err(Error::invalid("mpc needs a scene with fluid particles"));
    }
    if scene.channel_count == 0 {
        return Err(Error::invalid("mpc needs at least one control channel"));
    }
    if scene.duration_frames == 0 {
        return Err(Error::invalid("mpc needs a scene with at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = MpcState::initial(scene);
    let mut window = vec![vec![0.0; scene.channel_count]; config.horizon];
    let mut frames = vec![scene.fluid.clone()];
    let mut channels = vec![state.channels.clone()];
    let mut controls = Vec::with_capacity(scene.duration_frames);
    let mut losses = Vec::with_capacity(scene.duration_frames);
    let mut pour_phase2_at = None;
    for _ in 0..scene.duration_frames {
        let (_, grads) = mpc_rollout_grad(scene, &state, &window)?;
        if config.spot_check_probability > 0.0
            && rng.random::<f64>() < config.spot_check_probability
        {
            spot_check_window(scene, &state, &window, &grads, &mut rng)?;
        }
        update_window(&mut window, &grads, config);
        let executed = window[0].clone();
        let (next, loss) = advance_state(scene, &state, &executed)?;
        if pour_phase2_at.is_none() && next.pour.in_phase2() {
            pour_phase2_at = Some(next.frame);
        }
        state = next;
        frames.push(ParticleState {
            positions: state.positions.to_vectors(),
            velocities: state.velocities.to_vectors(),
            masses: scene.fluid.masses.clone(),
        });
        channels.push(state.channels.clone());
        controls.push(executed);
        losses.push(loss);
        window.rotate_left(1);
        if let Some(tail) = window.last_mut() {
            tail.iter_mut().for_each(|u| *u = 0.0);
        }
    }
    let metrics = task_metrics(
        scene,
        &frames.last().expect("at least the initial frame").positions,
        &state.channels,
        state.frame as f64,
    )?;
    Ok(MpcRun { frames, controls, channels, losses, metrics, pour_phase2_at })
}

impl MpcRun {
    /// Write the executed controls as CSV: one row per frame with the
    /// applied control components, the resulting channel values, and the
    /// executed loss.
    pub fn save_controls_csv(&self, path: &Path) -> Result<(), Error> {
        let k = self.channels.first().map_or(0, Vec::len);
        let names = controls_header(k);
        let header: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut w = CsvWriter::create(path, &header)?;
        for (f, control) in self.controls.iter().enumerate() {
            let mut row = control.clone();
            row.extend_from_slice(&self.channels[f + 1]);
            row.push(self.losses[f]);
            w.row(f, &row)?;
        }
        w.finish()
    }
}

/// Column names of the controls CSV for `k` channels.
fn controls_header(k: usize) -> Vec<String> {
    let mut names = vec!["frame".to_string()];
    names.extend((0..k).map(|i| format!("u{i}")));
    names.extend((0..k).map(|i| format!("c{i}")));
    names.push("loss".to_string());
    names
}

/// Read a controls CSV back: per-frame controls, channel values (the
/// initial all-zero entry is prepended), and executed losses.
pub fn read_controls_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>), Error> {
    let (header, rows) = read_csv(path)?;
    if header.len() < 4 || header.len() % 2 != 0 {
        return Err(Error::format(format!(
            "{}: controls csv needs columns frame,u..,c..,loss",
            path.display()
        )));
    }
    let k = (header.len() - 2) / 2;
    if header != controls_header(k) {
        return Err(Error::format(format!(
            "{}: unexpected controls csv header {header:?}",
            path.display()
        )));
    }
    let mut controls = Vec::with_capacity(rows.len());
    let mut channels = vec![vec![0.0; k]];
    let mut losses = Vec::with_capacity(rows.len());
    for (i, (frame, values)) in rows.iter().enumerate() {
        if *frame != i {
            return Err(Error::format(format!(
                "{}: controls csv rows must be consecutive frames, row {i} is frame {frame}",
                path.display()
            )));
        }
        if values.len() != 2 * k + 1 {
            return Err(Error::format(format!(
                "{}: row {i} has {} values, expected {}",
                path.display(),
                values.len(),
                2 * k + 1
            )));
        }
        controls.push(values[..k].to_vec());
        channels.push(values[k..2 * k].to_vec());
        losses.push(values[2 * k]);
    }
    Ok((controls, channels, losses))
}

// ---------------------------------------------------------------------------
// Visual policy
// ---------------------------------------------------------------------------

/// Magic bytes of the policy weight file.
pub const POLICY_MAGIC: &[u8; 8] = b"FGPOLICY";
/// Version of the policy weight file layout.
pub const POLICY_VERSION: u32 = 1;
/// Convolution kernels in the first layer.
pub const POLICY_KERNELS: usize = 10;
/// Convolution kernel side length.
pub const POLICY_KERNEL_SIZE: usize = 3;
/// Convolution stride.
pub const POLICY_STRIDE: usize = 2;
/// Width of the hidden dense layer.
pub const POLICY_HIDDEN: usize = 100;

/// Convolution output size for an input image.
fn conv_output(height: usize, width: usize) -> (usize, usize) {
    (
        (height - POLICY_KERNEL_SIZE) / POLICY_STRIDE + 1,
        (width - POLICY_KERNEL_SIZE) / POLICY_STRIDE + 1,
    )
}

/// A small convolutional controller: rendered particle image in, bounded
/// control rate out. Structure: 3x3 convolution (10 kernels, stride 2),
/// relu, dense layer of 100 units, relu, dense scalar, tanh scaled to the
/// control bound.
#[derive(Debug, Clone)]
pub struct Policy {
    /// Input image width in pixels.
    pub width: usize,
    /// Input image height in pixels.
    pub height: usize,
    /// Output control bound; the network output lies in (-bound, bound).
    pub bound: f64,
    pub conv_w: Value,
    pub conv_b: Value,
    pub dense1_w: Value,
    pub dense1_b: Value,
    pub dense2_w: Value,
    pub dense2_b: Value,
}

/// Weight-block shapes for an input size, in serialization order.
fn policy_shapes(width: usize, height: usize) -> [(usize, usize); 6] {
    let (oh, ow) = conv_output(height, width);
    let flat = POLICY_KERNELS * oh * ow;
    [
        (POLICY_KERNELS, POLICY_KERNEL_SIZE * POLICY_KERNEL_SIZE),
        (POLICY_KERNELS, 1),
        (POLICY_HIDDEN, flat),
        (POLICY_HIDDEN, 1),
        (1, POLICY_HIDDEN),
        (1, 1),
    ]
}

/// The policy's weight leaves on a tape.
pub struct PolicyVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub dense1_w: Var,
    pub dense1_b: Var,
    pub dense2_w: Var,
    pub dense2_b: Var,
}

impl Policy {
    /// Random initialization: weights uniform within the Xavier limit
    /// sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn new(width: usize, height: usize, bound: f64, seed: u64) -> Result<Self, Error> {
        if width < POLICY_KERNEL_SIZE || height < POLICY_KERNEL_SIZE {
            return Err(Error::invalid(format!(
                "policy input must be at least {POLICY_KERNEL_SIZE}x{POLICY_KERNEL_SIZE} pixels, got {width}x{height}"
            )));
        }
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::invalid(format!(
                "policy control bound must be finite and > 0, got {bound}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = policy_shapes(width, height);
        let mut block = |i: usize, weights: bool| {
            let (r, c) = shapes[i];
            if !weights {
                return Value::zeros(r, c);
            }
            let limit = (6.0 / (r + c) as f64).sqrt();
            let data = (0..r * c).map(|_| rng.random_range(-limit..limit)).collect();
            Value::from_vec(r, c, data)
        };
        Ok(Self {
            width,
            height,
            bound,
            conv_w: block(0, true),
            conv_b: block(1, false),
            dense1_w: block(2, true),
            dense1_b: block(3, false),
            dense2_w: block(4, true),
            dense2_b: block(5, false),
        })
    }

    fn blocks(&self) -> [&Value; 6] {
        [&self.conv_w, &self.conv_b, &self.dense1_w, &self.dense1_b, &self.dense2_w, &self.dense2_b]
    }

    /// Tracked weight leaves for training.
    pub fn leaves(&self, tape: &Tape) -> PolicyVars {
        PolicyVars {
            conv_w: tape.leaf(self.conv_w.clone()),
            conv_b: tape.leaf(self.conv_b.clone()),
            dense1_w: tape.leaf(self.dense1_w.clone()),
            dense1_b: tape.leaf(self.dense1_b.clone()),
            dense2_w: tape.leaf(self.dense2_w.clone()),
            dense2_b: tape.leaf(self.dense2_b.clone()),
        }
    }

    /// Untracked weights for inference.
    pub fn constants(&self, tape: &Tape) -> PolicyVars {
        PolicyVars {
            conv_w: tape.constant(self.conv_w.clone()),
            conv_b: tape.constant(self.conv_b.clone()),
            dense1_w: tape.constant(self.dense1_w.clone()),
            dense1_b: tape.constant(self.dense1_b.clone()),
            dense2_w: tape.constant(self.dense2_w.clone()),
            dense2_b: tape.constant(self.dense2_b.clone()),
        }
    }

    /// The network on the graph: image (height x width) to a 1x1 control.
    pub fn forward(&self, vars: &PolicyVars, image: &Var) -> Result<Var, Error> {
        if image.value().shape() != (self.height, self.width) {
            return Err(Error::invalid(format!(
                "policy expects a {}x{} image, got {}x{}",
                self.height,
                self.width,
                image.value().rows(),
                image.value().cols()
            )));
        }
        let (oh, ow) = conv_output(self.height, self.width);
        let conv = conv2d(
            image,
            &vars.conv_w,
            &vars.conv_b,
            POLICY_KERNEL_SIZE,
            POLICY_KERNEL_SIZE,
            POLICY_STRIDE,
        )
        .relu();
        let flat = conv.reshape(POLICY_KERNELS * oh * ow, 1);
        let hidden = vars.dense1_w.matmul(&flat).add(&vars.dense1_b).relu();
        let out = vars.dense2_w.matmul(&hidden).add(&vars.dense2_b).tanh().scale(self.bound);
        Ok(out)
    }

    /// Evaluate the policy on an image without gradients.
    pub fn act(&self, image: &Value) -> Result<f64, Error> {
        let tape = Tape::new();
        let vars = self.constants(&tape);
        let img = tape.constant(image.clone());
        Ok(self.forward(&vars, &img)?.scalar_value())
    }

    /// Write the weights: magic, format version, input size, bound, then
    /// each weight block as (rows: u32, cols: u32, row-major f64 data), all
    /// little-endian.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}: {e}", path.display())))?;
        let mut out = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(format!("writing {}: {e}", path.display()));
        out.write_all(POLICY_MAGIC).map_err(io_err)?;
        out.write_all(&POLICY_VERSION.to_le_bytes()).map_err(io_err)?;
        out.write_all(&(self.width as u32).to_le_bytes()).map_err(io_err)?;
        out.write_all(&(self.height as u32).to_le_bytes()).map_err(io_err)?;
        out.write_all(&self.bound.to_le_bytes()).map_err(io_err)?;
        for block in self.blocks() {
            out.write_all(&(block.rows() as u32).to_le_bytes()).map_err(io_err)?;
            out.write_all(&(block.cols() as u32).to_le_bytes()).map_err(io_err)?;
            for x in block.data() {
                out.write_all(&x.to_le_bytes()).map_err(io_err)?;
            }
        }
        out.flush().map_err(io_err)
    }

    /// Read weights written by [`Policy::save`], validating the layout.
    pub fn load(path: &Path) -> Result<Self, Error> {
        fn take<'a>(
            rest: &mut &'a [u8],
            n: usize,
            path: &Path,
            what: &str,
        ) -> Result<&'a [u8], Error> {
            if rest.len() < n {
                return Err(Error::format(format!(
                    "{}: truncated reading {what}",
                    path.display()
                )));
            }
            let (head, tail) = rest.split_at(n);
            *rest = tail;
            Ok(head)
        }
        fn take_u32(rest: &mut &[u8], path: &Path, what: &str) -> Result<u32, Error> {
            Ok(u32::from_le_bytes(take(rest, 4, path, what)?.try_into().expect("4 bytes")))
        }
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
        let rest = &mut bytes.as_slice();
        let fail = |what: &str| Error::format(format!("{}: {what}", path.display()));
        if take(rest, 8, path, "magic")? != POLICY_MAGIC {
            return Err(fail("not a policy weight file"));
        }
        let version = take_u32(rest, path, "version")?;
        if version != POLICY_VERSION {
            return Err(fail(&format!(
                "unsupported policy format version {version}, expected {POLICY_VERSION}"
            )));
        }
        let width = take_u32(rest, path, "width")? as usize;
        let height = take_u32(rest, path, "height")? as usize;
        if width < POLICY_KERNEL_SIZE || height < POLICY_KERNEL_SIZE {
            return Err(fail(&format!("input size {width}x{height} is too small")));
        }
        let bound = f64::from_le_bytes(take(rest, 8, path, "bound")?.try_into().expect("8 bytes"));
        if !(bound.is_finite() && bound > 0.0) {
            return Err(fail(&format!("control bound must be finite and > 0, got {bound}")));
        }
        let shapes = policy_shapes(width, height);
        let mut blocks = Vec::with_capacity(6);
        for (i, (er, ec)) in shapes.iter().enumerate() {
            let r = take_u32(rest, path, "block rows")? as usize;
            let c = take_u32(rest, path, "block cols")? as usize;
            if (r, c) != (*er, *ec) {
                return Err(fail(&format!("weight block {i} is {r}x{c}, expected {er}x{ec}")));
            }
            let raw = take(rest, 8 * r * c, path, "block data")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
                .collect();
            blocks.push(Value::from_vec(r, c, data));
        }
        if !rest.is_empty() {
            return Err(fail("trailing bytes after the last weight block"));
        }
        let mut it = blocks.into_iter();
        Ok(Self {
            width,
            height,
            bound,
            conv_w: it.next().expect("6 blocks"),
            conv_b: it.next().expect("6 blocks"),
            dense1_w: it.next().expect("6 blocks"),
            dense1_b: it.next().expect("6 blocks"),
            dense2_w: it.next().expect("6 blocks"),
            dense2_b: it.next().expect("6 blocks"),
        })
    }
}

// ---------------------------------------------------------------------------
// Policy training
// ---------------------------------------------------------------------------

/// One recorded trajectory the policy trains on: a catching-task scene with
/// per-frame particle states and channel values (typically a planner run).
#[derive(Debug, Clone)]
pub struct TrainingEpisode {
    pub scene: Scene,
    pub frames: Vec<ParticleState>,
    pub channels: Vec<Vec<f64>>,
}

impl TrainingEpisode {
    pub fn new(
        scene: Scene,
        frames: Vec<ParticleState>,
        channels: Vec<Vec<f64>>,
    ) -> Result<Self, Error> {
        if !matches!(scene.loss, Some(LossSpec::Catch { .. })) {
            return Err(Error::invalid(format!(
                "policy training needs a catching-task scene, got {:?}",
                scene.spec.name
            )));
        }
        if scene.camera.is_none() {
            return Err(Error::invalid(format!(
                "policy training needs a camera in scene {:?}",
                scene.spec.name
            )));
        }
        if frames.len() < 2 {
            return Err(Error::invalid("training episode needs at least two frames"));
        }
        if channels.len() != frames.len() {
            return Err(Error::invalid(format!(
                "training episode has {} frames but {} channel rows",
                frames.len(),
                channels.len()
            )));
        }
        if channels.iter().any(|c| c.len() != scene.channel_count) {
            return Err(Error::invalid(format!(
                "training episode channel rows must have {} component(s)",
                scene.channel_count
            )));
        }
        let n = scene.fluid.positions.len();
        if frames.iter().any(|f| f.positions.len() != n || f.velocities.len() != n) {
            return Err(Error::invalid(
                "training episode frames must match the scene's particle count",
            ));
        }
        Ok(Self { scene, frames, channels })
    }

    /// Wrap a planner run as a training episode.
    pub fn from_run(scene: Scene, run: &MpcRun) -> Result<Self, Error> {
        Self::new(scene, run.frames.clone(), run.channels.clone())
    }
}

/// Policy-training settings.
#[derive(Debug, Clone)]
pub struct PolicyTrainConfig {
    pub iterations: usize,
    /// Frames simulated (and backpropagated through) per iteration.
    pub rollout_len: usize,
    pub learning_rate: f64,
    /// Standard deviation of the Gaussian noise added to the cup's
    /// translation channel at the start of each rollout (meters).
    pub target_noise_sigma: f64,
    pub seed: u64,
    /// Probability per iteration of finite-difference checking one weight
    /// gradient component (0 disables; tests enable).
    pub spot_check_probability: f64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1200,
            rollout_len: 20,
            learning_rate: 2.5e-5,
            target_noise_sigma: 0.05,
            seed: 0,
            spot_check_probability: 0.0,
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.iterations == 0 {
            return Err(Error::invalid("policy training needs at least one iteration"));
        }
        if self.rollout_len == 0 {
            return Err(Error::invalid("policy rollouts need at least one frame"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.target_noise_sigma.is_finite() && self.target_noise_sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "target noise sigma must be finite and >= 0, got {}",
                self.target_noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.spot_check_probability) {
            return Err(Error::invalid(format!(
                "spot check probability must lie in [0, 1], got {}",
                self.spot_check_probability
            )));
        }
        Ok(())
    }
}

/// One training iteration's record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub iteration: usize,
    pub episode: usize,
    pub start_frame: usize,
    pub loss: f64,
}

/// Loss history of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TrainRow>,
    pub diverged: bool,
}

impl TrainTrace {
    pub fn save_csv(&self, path: &Path) -> Result<(), Error> {
        let mut w = CsvWriter::create(path, &["iteration", "episode", "start_frame", "loss"])?;
        for row in &self.rows {
            w.row(row.iteration, &[row.episode as f64, row.start_frame as f64, row.loss])?;
        }
        w.finish()
    }
}

/// The catching task's cup index, translation channel, and slide axis.
fn catch_binding(scene: &Scene) -> Result<(usize, usize, Unit<Vector3<f64>>), Error> {
    match &scene.loss {
        Some(LossSpec::Catch { cup_object, translation_channel, .. }) => {
            let cup = object_index(scene, cup_object, "catch task")?;
            let axis = translation_axis(scene, cup, *translation_channel)?;
            Ok((cup, *translation_channel, axis))
        }
        _ => Err(Error::invalid(format!(
            "policy training needs a catching-task scene, got {:?}",
            scene.spec.name
        ))),
    }
}

/// The scene camera shifted to track the cup: the whole rig translates with
/// the channel value so the cup stays centered in the observation.
fn tracking_camera(base: &CameraModel, axis: Unit<Vector3<f64>>, channel_value: f64) -> CameraModel {
    let shift = axis.into_inner() * channel_value;
    CameraModel {
        pose: base.pose.compose(&RigidPose::from_translation(-shift)),
        ..base.clone()
    }
}

/// One policy rollout from a recorded frame: render, act, simulate, and sum
/// the catch loss per step. Returns the summed loss and, when `tracked`,
/// gradients for each weight block (serialization order). A non-finite loss
/// reports as-is with no gradients.
fn policy_rollout(
    policy: &Policy,
    episode: &TrainingEpisode,
    start: usize,
    channels0: &[f64],
    steps: usize,
    tracked: bool,
) -> Result<(f64, Option<Vec<Value>>), Error> {
    let scene = &episode.scene;
    let (_, tc, axis) = catch_binding(scene)?;
    let camera = scene.camera.as_ref().expect("validated by TrainingEpisode::new");
    if (camera.width, camera.height) != (policy.width, policy.height) {
        return Err(Error::invalid(format!(
            "policy expects {}x{} observations but the scene camera renders {}x{}",
            policy.width, policy.height, camera.width, camera.height
        )));
    }
    let dt = scene.params.dt;
    let config = ProjectionConfig::default();
    let tape = Tape::new();
    let vars = if tracked { policy.leaves(&tape) } else { policy.constants(&tape) };
    let params = StepParams::constants(&tape, &scene.params, &episode.frames[start].masses);
    let mut p = tape.constant(Value::from_vectors(&episode.frames[start].positions));
    let mut v = tape.constant(Value::from_vectors(&episode.frames[start].velocities));
    let mut c_vars: Vec<Var> = channels0.iter().map(|&c| tape.scalar(c)).collect();
    let mut total: Option<Var> = None;
    for t in 0..steps {
        let frame = (start + t + 1) as f64;
        let cam = tracking_camera(camera, axis, c_vars[tc].scalar_value());
        let image = project_particles(&p, &cam, &config, None);
        let u = policy.forward(&vars, &image)?;
        c_vars[tc] = c_vars[tc].add(&u.scale(dt));
        let objects = Rc::new(scene.objects_at(frame));
        match step(&p, &v, &params, &objects, &c_vars) {
            Ok((p2, v2, _)) => {
                p = p2;
                v = v2;
            }
            Err(e) if e.kind() == crate::ErrorKind::Numeric => return Ok((f64::NAN, None)),
            Err(e) => return Err(e),
        }
        let l = scene_loss(scene, &p, &c_vars, frame, false)?;
        total = Some(match total {
            None => l,
            Some(acc) => acc.add(&l),
        });
    }
    let total = total.expect("steps >= 1");
    let loss = total.scalar_value();
    if !loss.is_finite() || !tracked {
        return Ok((loss, None));
    }
    let grads = tape.backward(&total)?;
    let blocks = vec![
        grads.wrt(&vars.conv_w),
        grads.wrt(&vars.conv_b),
        grads.wrt(&vars.dense1_w),
        grads.wrt(&vars.dense1_b),
        grads.wrt(&vars.dense2_w),
        grads.wrt(&vars.dense2_b),
    ];
    Ok((loss, Some(blocks)))
}

/// Finite-difference check of one randomly chosen weight gradient component
/// against rerunning the same rollout with the weight nudged.
#[allow(clippy::too_many_arguments)]
fn spot_check_policy(
    policy: &Policy,
    episode: &TrainingEpisode,
    start: usize,
    channels0: &[f64],
    steps: usize,
    grads: &[Value],
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), Error> {
    let block = rng.random_range(0..grads.len());
    let j = rng.random_range(0..grads[block].len());
    let nudge = |delta: f64| {
        let mut p = policy.clone();
        let field = match block {
            0 => &mut p.conv_w,
            1 => &mut p.conv_b,
            2 => &mut p.dense1_w,
            3 => &mut p.dense1_b,
            4 => &mut p.dense2_w,
            _ => &mut p.dense2_b,
        };
        field.data_mut()[j] += delta;
        p
    };
    let theta = policy.blocks()[block].data()[j];
    let h = 1e-6 * theta.abs().max(1.0);
    let (lp, _) = policy_rollout(&nudge(h), episode, start, channels0, steps, false)?;
    let (lm, _) = policy_rollout(&nudge(-h), episode, start, channels0, steps, false)?;
    if !(lp.is_finite() && lm.is_finite()) {
        return Ok(());
    }
    let fd = (lp - lm) / (2.0 * h);
    let a = grads[block].data()[j];
    if a.abs().max(fd.abs()) > SPOT_CHECK_FLOOR && relative_error(a, fd) > SPOT_CHECK_TOLERANCE {
        return Err(Error::numeric(format!(
            "policy gradient spot check failed at iteration {iteration}: block {block} element {j} analytic {a} vs finite difference {fd}"
        )));
    }
    Ok(())
}

/// Train the policy in place with backpropagation through simulated
/// rollouts.
///
/// Per iteration: sample an episode and start frame, perturb the cup's
/// translation channel with Gaussian noise, roll the policy out for
/// `rollout_len` frames (the observation camera tracks the cup, so inputs
/// are translation-invariant), sum the catching loss over the rollout, and
/// take one Adam step on all weights. A non-finite loss aborts training and
/// returns the trace with its `diverged` flag set.
pub fn train_policy(
    policy: &mut Policy,
    episodes: &[TrainingEpisode],
    config: &PolicyTrainConfig,
) -> Result<TrainTrace, Error> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::invalid("policy training needs at least one episode"));
    }
    for ep in episodes {
        catch_binding(&ep.scene)?;
        let camera = ep.scene.camera.as_ref().expect("validated by TrainingEpisode::new");
        if (camera.width, camera.height) != (policy.width, policy.height) {
            return Err(Error::invalid(format!(
                "policy expects {}x{} observations but scene {:?} renders {}x{}",
                policy.width, policy.height, ep.scene.spec.name, camera.width, camera.height
            )));
        }
    }
    let optim = OptimConfig { learning_rate: config.learning_rate, ..OptimConfig::default() };
    optim.validate()?;
    let mut adam: Vec<AdamState> =
        policy.blocks().iter().map(|b| AdamState::new(b.len())).collect();
    let noise = Normal::new(0.0, config.target_noise_sigma)
        .map_err(|e| Error::invalid(format!("target noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::with_capacity(config.iterations);
    let mut diverged = false;
    for iteration in 0..config.iterations {
        let ep_idx = rng.random_range(0..episodes.len());
        let episode = &episodes[ep_idx];
        let start = rng.random_range(0..episode.frames.len() - 1);
        let (_, tc, _) = catch_binding(&episode.scene)?;
        let mut channels0 = episode.channels[start].clone();
        channels0[tc] += noise.sample(&mut rng);
        let (loss, grads) =
            policy_rollout(policy, episode, start, &channels0, config.rollout_len, true)?;
        rows.push(TrainRow { iteration, episode: ep_idx, start_frame: start, loss });
        let Some(grads) = grads else {
            diverged = true;
            log::warn!("policy training diverged at iteration {iteration}: loss {loss}");
            break;
        };
        if config.spot_check_probability > 0.0
            && rng.random::<f64>() < config.spot_check_probability
        {
            spot_check_policy(
                policy,
                episode,
                start,
                &channels0,
                config.rollout_len,
                &grads,
                iteration,
                &mut rng,
            )?;
        }
        let blocks: [&mut Value; 6] = [
            &mut policy.conv_w,
            &mut policy.conv_b,
            &mut policy.dense1_w,
            &mut policy.dense1_b,
            &mut policy.dense2_w,
            &mut policy.dense2_b,
        ];
        for ((block, grad), state) in blocks.into_iter().zip(&grads).zip(&mut adam) {
            adam_step(block.data_mut(), grad.data(), state, &optim)?;
        }
    }
    Ok(TrainTrace { rows, diverged })
}
