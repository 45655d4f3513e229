//! Run orchestration: simulating scenes into output directories, rendering
//! preview images, and loading recorded runs back in.
//!
//! An output directory is self-contained: the resolved scene document
//! (`scene.json`), one dump per frame, per-step diagnostics
//! (`diagnostics.csv`), and a dataset manifest (`dataset.json`) that
//! [`crate::estimation::TrajectoryDataset::load`] and [`load_episode`]
//! accept. Planner runs add their executed controls (`controls.csv`) and
//! task metrics (`metrics.json`).

use std::path::Path;
use std::rc::Rc;

use crate::autodiff::{Tape, Value, Var};
use crate::control::{read_controls_csv, MpcRun, TaskMetrics, TrainingEpisode};
use crate::io::{
    diagnostics_writer, list_frames, read_frame, write_diagnostics_row, write_frame,
    DatasetManifest, DumpFormat,
};
use crate::pbf::{step, StepDiagnostics, StepParams};
use crate::projection::{project_particles, ProjectionConfig};
use crate::scene::Scene;
use crate::state::ParticleState;
use crate::Error;

/// Resolved scene document written into every output directory.
pub const SCENE_FILE: &str = "scene.json";
/// Per-step solver diagnostics CSV.
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
/// Executed planner controls CSV.
pub const CONTROLS_FILE: &str = "controls.csv";
/// Task metrics JSON.
pub const METRICS_FILE: &str = "metrics.json";
/// Policy weights file.
pub const POLICY_FILE: &str = "policy.bin";
/// Training / estimation trace CSV.
pub const TRACE_FILE: &str = "trace.csv";

/// How an output directory is written.
#[derive(Debug, Clone)]
pub struct SimulateOptions {
    /// Frame dump encoding.
    pub format: DumpFormat,
    /// Also render one grayscale PNG per frame through the scene camera.
    pub render: bool,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self { format: DumpFormat::Csv, render: false }
    }
}

/// In-memory simulation results: particle states per frame (the initial
/// state first) and the diagnostics of each step between them.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub states: Vec<ParticleState>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Simulate the scene with neutral controls, producing `frames` states:
/// the initial fluid followed by `frames - 1` stepped states. Keyframed
/// objects follow their schedules; control channels stay zero. Zero frames
/// produce an empty output.
pub fn simulate_scene(scene: &Scene, frames: usize) -> Result<SimulationOutput, Error> {
    let mut out = SimulationOutput { states: Vec::with_capacity(frames), diagnostics: Vec::new() };
    if frames == 0 {
        return Ok(out);
    }
    scene.fluid.validate()?;
    out.states.push(scene.fluid.clone());
    let tape = Tape::new();
    let params = StepParams::constants(&tape, &scene.params, &scene.fluid.masses);
    let channels: Vec<Var> =
        scene.initial_channels().iter().map(|&c| tape.scalar(c)).collect();
    let mut p = tape.constant(Value::from_vectors(&scene.fluid.positions));
    let mut v = tape.constant(Value::from_vectors(&scene.fluid.velocities));
    for k in 0..frames - 1 {
        let frame = (k + 1) as f64;
        let objects = Rc::new(scene.objects_at(frame));
        let (p2, v2, d) = step(&p, &v, &params, &objects, &channels)
            .map_err(|e| e.prefixed(&format!("simulating frame {frame}")))?;
        p = p2;
        v = v2;
        out.states.push(ParticleState {
            positions: p.value().to_vectors(),
            velocities: v.value().to_vectors(),
            masses: scene.fluid.masses.clone(),
        });
        out.diagnostics.push(d);
    }
    Ok(out)
}

/// Write the resolved scene document into `dir`.
fn write_scene_json(dir: &Path, scene: &Scene) -> Result<(), Error> {
    let path = dir.join(SCENE_FILE);
    let json = serde_json::to_string_pretty(&scene.spec)?;
    std::fs::write(&path, json)
        .map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}: {e}", dir.display())))
}

fn write_frames(
    dir: &Path,
    states: &[ParticleState],
    format: DumpFormat,
) -> Result<(), Error> {
    for (k, state) in states.iter().enumerate() {
        write_frame(dir, k, state, format)?;
    }
    Ok(())
}

fn write_dataset_manifest(
    dir: &Path,
    scene: &Scene,
    frames: usize,
    format: DumpFormat,
) -> Result<(), Error> {
    DatasetManifest {
        frame_rate: 1.0 / scene.params.dt,
        frames,
        format,
        params: scene.params,
        scene: SCENE_FILE.to_string(),
    }
    .save(dir)
}

/// Write a simulation into `dir`: scene document, one dump per state,
/// per-step diagnostics, and a dataset manifest. An empty simulation (zero
/// frames) creates the directory and writes nothing else, so the caller's
/// run manifest is the directory's only record.
pub fn write_simulation(
    dir: &Path,
    scene: &Scene,
    output: &SimulationOutput,
    options: &SimulateOptions,
) -> Result<(), Error> {
    create_dir(dir)?;
    if output.states.is_empty() {
        return Ok(());
    }
    write_scene_json(dir, scene)?;
    write_frames(dir, &output.states, options.format)?;
    let path = dir.join(DIAGNOSTICS_FILE);
    let mut w = diagnostics_writer(&path)?;
    for (k, d) in output.diagnostics.iter().enumerate() {
        write_diagnostics_row(&mut w, k + 1, d)?;
    }
    w.finish()?;
    write_dataset_manifest(dir, scene, output.states.len(), options.format)?;
    if options.render {
        render_frames(dir, scene, &output.states)?;
    }
    Ok(())
}

/// Write a planner run into `dir`: everything [`write_simulation`] writes
/// plus the executed controls and the task metrics.
pub fn write_mpc_run(
    dir: &Path,
    scene: &Scene,
    run: &MpcRun,
    options: &SimulateOptions,
) -> Result<(), Error> {
    create_dir(dir)?;
    write_scene_json(dir, scene)?;
    write_frames(dir, &run.frames, options.format)?;
    run.save_controls_csv(&dir.join(CONTROLS_FILE))?;
    write_metrics(dir, &run.metrics)?;
    write_dataset_manifest(dir, scene, run.frames.len(), options.format)?;
    if options.render {
        render_frames(dir, scene, &run.frames)?;
    }
    Ok(())
}

/// Write task metrics as `metrics.json` in `dir`.
pub fn write_metrics(dir: &Path, metrics: &TaskMetrics) -> Result<(), Error> {
    let path = dir.join(METRICS_FILE);
    let json = serde_json::to_string_pretty(metrics)?;
    std::fs::write(&path, json)
        .map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}

/// Render one grayscale PNG per state through the scene camera, named
/// `render_NNNNNN.png`; returns how many were written. The soft silhouette
/// in (-1, 1) maps linearly onto pixel values 0..=255.
pub fn render_frames(dir: &Path, scene: &Scene, states: &[ParticleState]) -> Result<usize, Error> {
    let camera = scene
        .camera
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("scene {:?} has no camera to render with", scene.spec.name)))?;
    let config = ProjectionConfig::default();
    let tape = Tape::new();
    for (k, state) in states.iter().enumerate() {
        let p = tape.constant(Value::from_vectors(&state.positions));
        let image = project_particles(&p, camera, &config, None);
        let value = image.value();
        let bytes: Vec<u8> = value
            .data()
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::GrayImage::from_raw(camera.width as u32, camera.height as u32, bytes)
            .expect("buffer length matches the camera size");
        let path = dir.join(format!("render_{k:06}.png"));
        img.save(&path)
            .map_err(|e| Error::io(format!("writing {}: {e}", path.display())))?;
    }
    Ok(states.len())
}

/// Resolve a dataset manifest's scene field: a builtin name first, then a
/// path relative to the directory.
fn resolve_scene(dir: &Path, name: &str) -> Result<Scene, Error> {
    match Scene::from_builtin(name) {
        Ok(scene) => Ok(scene),
        Err(_) => Scene::load(&dir.join(name)),
    }
}

/// Load a recorded planner run directory as a policy-training episode:
/// the scene, the per-frame states, and the channel values reconstructed
/// from the controls CSV (planner runs always start from neutral channels).
pub fn load_episode(dir: &Path) -> Result<TrainingEpisode, Error> {
    let manifest = DatasetManifest::load(dir)?;
    let scene = resolve_scene(dir, &manifest.scene)?;
    let frame_paths = list_frames(dir)?;
    if frame_paths.len() != manifest.frames {
        return Err(Error::format(format!(
            "{} lists {} frames but {} dumps are present",
            dir.display(),
            manifest.frames,
            frame_paths.len()
        )));
    }
    let frames: Result<Vec<ParticleState>, Error> =
        frame_paths.iter().map(|p| read_frame(p)).collect();
    let frames = frames?;
    let (_, channels, _) = read_controls_csv(&dir.join(CONTROLS_FILE))?;
    TrainingEpisode::new(scene, frames, channels)
}

/// Load a recorded run's frame dumps.
pub fn load_frames(dir: &Path) -> Result<Vec<ParticleState>, Error> {
    list_frames(dir)?.iter().map(|p| read_frame(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::PoseSpec;
    use crate::scene::{FillSpec, ObjectSpec, SceneSpec, ShapeSpec};
    use crate::state::FluidParams;

    /// 27 particles falling onto a floor plane.
    fn mini_drop_scene() -> Scene {
        let spec = SceneSpec {
            name: "mini_drop".into(),
            duration_frames: 8,
            params: FluidParams::default(),
            fluid: vec![FillSpec::Box { min: [0.0, 0.2, 0.0], max: [0.101, 0.301, 0.101] }],
            objects: vec![ObjectSpec {
                name: "floor".into(),
                shape: ShapeSpec::Plane { normal: [0.0, 1.0, 0.0], offset: 0.0 },
                pose: PoseSpec::default(),
                keyframes: vec![],
                bindings: vec![],
            }],
            channels: 0,
            control_bound: 1.0,
            camera: None,
            loss: None,
        };
        let scene = Scene::from_spec(spec, None).unwrap();
        assert_eq!(scene.fluid.positions.len(), 27);
        scene
    }

    #[test]
    fn simulation_writes_one_dump_per_frame_with_diagnostics() {
        let scene = mini_drop_scene();
        let output = simulate_scene(&scene, 8).unwrap();
        assert_eq!(output.states.len(), 8);
        assert_eq!(output.diagnostics.len(), 7);
        let dir = tempfile::tempdir().unwrap();
        let options = SimulateOptions::default();
        write_simulation(dir.path(), &scene, &output, &options).unwrap();
        let frames = list_frames(dir.path()).unwrap();
        assert_eq!(frames.len(), 8);
        // The dumps round trip exactly and match the in-memory states.
        for (k, path) in frames.iter().enumerate() {
            let state = read_frame(path).unwrap();
            assert_eq!(state.positions, output.states[k].positions);
            assert_eq!(state.velocities, output.states[k].velocities);
            assert_eq!(state.masses, output.states[k].masses);
        }
        let (header, rows) = crate::io::read_csv(&dir.path().join(DIAGNOSTICS_FILE)).unwrap();
        assert_eq!(header.len(), crate::io::DIAGNOSTICS_HEADER.len());
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].0, 1, "diagnostics rows are labeled by produced frame");
        // The dataset manifest makes the directory loadable as a dataset.
        let dataset = crate::estimation::TrajectoryDataset::load(dir.path()).unwrap();
        assert_eq!(dataset.frames.len(), 8);
        assert_eq!(dataset.scene.spec.name, "mini_drop");
    }

    #[test]
    fn zero_frames_leave_the_directory_empty() {
        let scene = mini_drop_scene();
        let output = simulate_scene(&scene, 0).unwrap();
        assert!(output.states.is_empty());
        let dir = tempfile::tempdir().unwrap();
        write_simulation(dir.path(), &scene, &output, &SimulateOptions::default()).unwrap();
        let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert!(entries.is_empty(), "zero-frame runs must write no files");
    }

    #[test]
    fn reruns_are_bit_identical_on_disk() {
        let scene = mini_drop_scene();
        let options = SimulateOptions { format: DumpFormat::Bin, render: false };
        let dirs: Vec<_> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let output = simulate_scene(&scene, 6).unwrap();
                write_simulation(dir.path(), &scene, &output, &options).unwrap();
                dir
            })
            .collect();
        for name in ["frame_000005.bin", DIAGNOSTICS_FILE, SCENE_FILE] {
            let a = std::fs::read(dirs[0].path().join(name)).unwrap();
            let b = std::fs::read(dirs[1].path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical reruns");
        }
    }

    #[test]
    fn mpc_run_directories_load_back_as_training_episodes() {
        let scene = Scene::from_builtin("catch").unwrap();
        let frame = scene.fluid.clone();
        let run = MpcRun {
            frames: vec![frame.clone(), frame.clone(), frame],
            controls: vec![vec![0.5], vec![-0.25]],
            channels: vec![vec![0.0], vec![0.5 / 60.0], vec![0.25 / 60.0]],
            losses: vec![0.4, 0.3],
            metrics: TaskMetrics::Catch { caught_fraction: 0.0 },
            pour_phase2_at: None,
        };
        let dir = tempfile::tempdir().unwrap();
        write_mpc_run(dir.path(), &scene, &run, &SimulateOptions::default()).unwrap();
        // The scene document regenerates the same fluid fill, so the loaded
        // episode validates against the dumped frames.
        let episode = load_episode(dir.path()).unwrap();
        assert_eq!(episode.frames.len(), 3);
        assert_eq!(episode.channels, run.channels);
        let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let metrics: TaskMetrics = serde_json::from_str(&text).unwrap();
        assert_eq!(metrics, run.metrics);
    }

    #[test]
    fn rendering_needs_a_camera_and_writes_correctly_sized_images() {
        let scene = mini_drop_scene();
        let dir = tempfile::tempdir().unwrap();
        assert!(render_frames(dir.path(), &scene, &[scene.fluid.clone()]).is_err());
        let mut catch = Scene::from_builtin("catch").unwrap();
        catch.fluid.positions.truncate(4);
        catch.fluid.velocities.truncate(4);
        catch.fluid.masses.truncate(4);
        let n = render_frames(dir.path(), &catch, &[catch.fluid.clone()]).unwrap();
        assert_eq!(n, 1);
        let img = image::open(dir.path().join("render_000000.png")).unwrap();
        assert_eq!((img.width(), img.height()), (80, 60));
    }
}
