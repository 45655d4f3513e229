//! Scene descriptions: the JSON schema, fluid fill regions, keyframed
//! collider trajectories, control-channel bindings, and the built-in
//! benchmark scenes.
//!
//! A scene file resolves to a [`Scene`]: an initial particle state, fluid
//! parameters, a set of posed signed-distance colliders (queried per frame
//! through [`Scene::objects_at`]), an optional camera, and an optional
//! control-task loss. Container shapes (cups, open boxes) are described
//! analytically in the file and baked onto sampled distance grids at load
//! time, since a hollow container is a CSG difference that the analytic
//! primitive set cannot express as a union.

use std::path::Path;

use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::convsdf::{read_grid_sdf, Binding, BindingMotion, GridSdf, PosedSdf, SdfObjectSet, SdfShape};
use crate::pose::{PoseSpec, RigidPose};
use crate::projection::CameraModel;
use crate::state::{fill_box, fill_where, FluidParams, ParticleState};
use crate::Error;

/// Serializable shape description. Analytic primitives map directly onto
/// runtime shapes; `cup` and `open_box` are hollow containers baked onto a
/// distance grid with the given cell size; `grid_file` loads a pre-sampled
/// grid relative to the scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShapeSpec {
    Plane {
        normal: [f64; 3],
        #[serde(default)]
        offset: f64,
    },
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: [f64; 3],
    },
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    /// Upright hollow cylinder, open at +y, local origin at the outside
    /// bottom center. Total height = base + inner_depth.
    Cup {
        inner_radius: f64,
        wall: f64,
        inner_depth: f64,
        base: f64,
        cell: f64,
    },
    /// Rectangular basin, open at +y, local origin at the outside bottom
    /// center. The cavity has the given half extents (full height 2*y).
    OpenBox {
        inner_half_extents: [f64; 3],
        wall: f64,
        cell: f64,
    },
    GridFile {
        path: String,
    },
}

/// Exact signed distance of the cup container in its local frame.
fn cup_distance(p: Vector3<f64>, inner_radius: f64, wall: f64, inner_depth: f64, base: f64) -> f64 {
    let height = base + inner_depth;
    let outer = SdfShape::Cylinder { radius: inner_radius + wall, half_height: height / 2.0 }
        .distance(p - Vector3::new(0.0, height / 2.0, 0.0));
    // The cavity extends well past the rim so the opening is cut clean.
    let cavity = SdfShape::Cylinder { radius: inner_radius, half_height: inner_depth }
        .distance(p - Vector3::new(0.0, base + inner_depth, 0.0));
    outer.max(-cavity)
}

/// Exact signed distance of the open-box container in its local frame.
fn open_box_distance(p: Vector3<f64>, inner: Vector3<f64>, wall: f64) -> f64 {
    let height = 2.0 * inner.y + wall;
    let outer = SdfShape::Box { half_extents: Vector3::new(inner.x + wall, height / 2.0, inner.z + wall) }
        .distance(p - Vector3::new(0.0, height / 2.0, 0.0));
    let cavity = SdfShape::Box { half_extents: Vector3::new(inner.x, height, inner.z) }
        .distance(p - Vector3::new(0.0, wall + height, 0.0));
    outer.max(-cavity)
}

/// Bake an analytic container field onto a grid covering `lo..hi` plus a
/// three-cell pad.
fn bake_grid(lo: Vector3<f64>, hi: Vector3<f64>, cell: f64, f: impl Fn(Vector3<f64>) -> f64) -> Result<GridSdf, Error> {
    if !(cell.is_finite() && cell > 0.0) {
        return Err(Error::invalid(format!("grid cell size must be finite and > 0, got {cell}")));
    }
    let pad = 3.0 * cell;
    let origin = lo - Vector3::new(pad, pad, pad);
    let extent = hi - lo + Vector3::new(2.0 * pad, 2.0 * pad, 2.0 * pad);
    let dims = [
        (extent.x / cell).ceil() as usize + 1,
        (extent.y / cell).ceil() as usize + 1,
        (extent.z / cell).ceil() as usize + 1,
    ];
    GridSdf::from_fn(dims, cell, origin, f)
}

impl ShapeSpec {
    /// Build the runtime shape, baking containers and loading grid files.
    pub fn bake(&self, base_dir: Option<&Path>) -> Result<SdfShape, Error> {
        match self {
            ShapeSpec::Plane { normal, offset } => {
                let n = Vector3::from(*normal);
                if n.norm() == 0.0 {
                    return Err(Error::invalid("plane normal must be nonzero"));
                }
                Ok(SdfShape::Plane { normal: Unit::new_normalize(n), offset: *offset })
            }
            ShapeSpec::Sphere { radius } => Ok(SdfShape::Sphere { radius: *radius }),
            ShapeSpec::Box { half_extents } => {
                Ok(SdfShape::Box { half_extents: Vector3::from(*half_extents) })
            }
            ShapeSpec::Cylinder { radius, half_height } => {
                Ok(SdfShape::Cylinder { radius: *radius, half_height: *half_height })
            }
            ShapeSpec::Cup { inner_radius, wall, inner_depth, base, cell } => {
                for (name, v) in [
                    ("inner_radius", *inner_radius),
                    ("wall", *wall),
                    ("inner_depth", *inner_depth),
                    ("base", *base),
                ] {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(Error::invalid(format!("cup {name} must be finite and > 0, got {v}")));
                    }
                }
                let r = inner_radius + wall;
                let h = base + inner_depth;
                let grid = bake_grid(
                    Vector3::new(-r, 0.0, -r),
                    Vector3::new(r, h, r),
                    *cell,
                    |p| cup_distance(p, *inner_radius, *wall, *inner_depth, *base),
                )?;
                Ok(SdfShape::Grid(grid.into()))
            }
            ShapeSpec::OpenBox { inner_half_extents, wall, cell } => {
                let inner = Vector3::from(*inner_half_extents);
                if !(inner.iter().all(|v| v.is_finite() && *v > 0.0) && wall.is_finite() && *wall > 0.0) {
                    return Err(Error::invalid("open box extents and wall must be finite and > 0"));
                }
                let h = 2.0 * inner.y + wall;
                let grid = bake_grid(
                    Vector3::new(-inner.x - wall, 0.0, -inner.z - wall),
                    Vector3::new(inner.x + wall, h, inner.z + wall),
                    *cell,
                    |p| open_box_distance(p, inner, *wall),
                )?;
                Ok(SdfShape::Grid(grid.into()))
            }
            ShapeSpec::GridFile { path } => {
                let resolved = match base_dir {
                    Some(dir) => dir.join(path),
                    None => Path::new(path).to_path_buf(),
                };
                Ok(SdfShape::Grid(read_grid_sdf(&resolved)?.into()))
            }
        }
    }
}

/// One pose sample on an object trajectory; frames between samples are
/// interpolated (linear translation, spherical rotation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSpec {
    pub frame: f64,
    pub pose: PoseSpec,
}

/// Control-channel motion applied on top of an object's keyframed pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MotionSpec {
    RotateAboutAxis { axis: [f64; 3], pivot: [f64; 3] },
    TranslateAlongAxis { axis: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingSpec {
    pub channel: usize,
    pub motion: MotionSpec,
}

impl BindingSpec {
    fn build(&self) -> Result<Binding, Error> {
        let motion = match &self.motion {
            MotionSpec::RotateAboutAxis { axis, pivot } => {
                let a = Vector3::from(*axis);
                if a.norm() == 0.0 {
                    return Err(Error::invalid("binding rotation axis must be nonzero"));
                }
                BindingMotion::RotateAboutAxis { axis: Unit::new_normalize(a), pivot: Vector3::from(*pivot) }
            }
            MotionSpec::TranslateAlongAxis { axis } => {
                let a = Vector3::from(*axis);
                if a.norm() == 0.0 {
                    return Err(Error::invalid("binding translation axis must be nonzero"));
                }
                BindingMotion::TranslateAlongAxis { axis: Unit::new_normalize(a) }
            }
        };
        Ok(Binding { channel: self.channel, motion })
    }
}

/// One collider in the scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: ShapeSpec,
    /// Static pose; ignored when `keyframes` is non-empty.
    #[serde(default)]
    pub pose: PoseSpec,
    #[serde(default)]
    pub keyframes: Vec<KeyframeSpec>,
    #[serde(default)]
    pub bindings: Vec<BindingSpec>,
}

/// A region to fill with fluid particles at rest spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FillSpec {
    /// Axis-aligned box, lattice anchored at `min`, both faces inclusive.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Lattice points over `[min, max]` strictly inside the posed shape:
    /// signed distance < -margin.
    ShapeInterior {
        shape: ShapeSpec,
        #[serde(default)]
        pose: PoseSpec,
        #[serde(default)]
        margin: f64,
        min: [f64; 3],
        max: [f64; 3],
    },
}

/// Camera placement in the scene file. The pose is the camera's pose in the
/// world (camera looks along its local +z); it is inverted into the
/// world-to-camera transform of the runtime model. Principal point defaults
/// to the image center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    #[serde(default)]
    pub cx: Option<f64>,
    #[serde(default)]
    pub cy: Option<f64>,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub pose: PoseSpec,
}

impl CameraSpec {
    pub fn build(&self) -> Result<CameraModel, Error> {
        let world_to_camera = self.pose.to_pose().inverse();
        let mut camera = CameraModel::centered(self.fx, self.fy, self.width, self.height, world_to_camera);
        if let Some(cx) = self.cx {
            camera.cx = cx;
        }
        if let Some(cy) = self.cy {
            camera.cy = cy;
        }
        camera.validate()?;
        Ok(camera)
    }
}

fn default_weight_c() -> f64 {
    2.0
}

fn default_target_fraction() -> f64 {
    0.5
}

/// Control-task loss attached to a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LossSpec {
    /// Mean squared particle distance to a world-space target point.
    Plate { target: [f64; 3] },
    /// Phase 1: mean squared particle distance to the lip point. Once the
    /// poured mass reaches `target_fraction` of the contents, switches
    /// permanently to phase 2: squared rotation of the pouring channel.
    Pour {
        lip_point: [f64; 3],
        #[serde(default = "default_target_fraction")]
        target_fraction: f64,
        cup_object: String,
        rotation_channel: usize,
    },
    /// Mean over particles of |x_p - x_center| / (1 + c max(0, y_top - y_p)),
    /// where x_center follows the cup's translation channel and y_top is the
    /// cup base height plus `rim_height`.
    Catch {
        cup_object: String,
        translation_channel: usize,
        rim_height: f64,
        #[serde(default = "default_weight_c")]
        weight_c: f64,
    },
}

fn default_control_bound() -> f64 {
    1.0
}

/// The on-disk scene schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub duration_frames: usize,
    #[serde(default)]
    pub params: FluidParams,
    #[serde(default)]
    pub fluid: Vec<FillSpec>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    /// Number of control channels bindings may reference.
    #[serde(default)]
    pub channels: usize,
    /// Per-channel control magnitude bound (channel units per second).
    #[serde(default = "default_control_bound")]
    pub control_bound: f64,
    #[serde(default)]
    pub camera: Option<CameraSpec>,
    #[serde(default)]
    pub loss: Option<LossSpec>,
}

/// A resolved collider: baked shape, keyframed base trajectory, bindings.
#[derive(Debug, Clone)]
pub struct SceneObject {
    pub name: String,
    pub shape: SdfShape,
    /// (frame, pose) samples in strictly increasing frame order; never empty.
    pub keyframes: Vec<(f64, RigidPose)>,
    pub bindings: Vec<Binding>,
}

impl SceneObject {
    /// Base pose at a (possibly fractional) frame: clamped at the ends,
    /// interpolated between samples.
    pub fn pose_at(&self, frame: f64) -> RigidPose {
        let first = &self.keyframes[0];
        if frame <= first.0 {
            return first.1;
        }
        let last = self.keyframes.last().unwrap();
        if frame >= last.0 {
            return last.1;
        }
        let seg = self.keyframes.windows(2).find(|w| frame <= w[1].0).unwrap();
        let t = (frame - seg[0].0) / (seg[1].0 - seg[0].0);
        seg[0].1.interpolate(&seg[1].1, t)
    }
}

/// A fully resolved scene, ready to simulate.
#[derive(Debug, Clone)]
pub struct Scene {
    /// The spec the scene was built from (round-trips to the file contents).
    pub spec: SceneSpec,
    pub params: FluidParams,
    pub duration_frames: usize,
    pub fluid: ParticleState,
    pub objects: Vec<SceneObject>,
    pub channel_count: usize,
    pub control_bound: f64,
    pub camera: Option<CameraModel>,
    pub loss: Option<LossSpec>,
}

impl Scene {
    /// Load and resolve a scene file. Grid-file shapes resolve relative to
    /// the scene file's directory. A `params` object that omits
    /// `rest_density` gets it recalibrated from its smoothing radius,
    /// spacing fraction, and particle mass.
    pub fn load(path: &Path) -> Result<Scene, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
        let json: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        Self::from_json_value(json, path.parent()).map_err(|e| e.prefixed(&path.display().to_string()))
    }

    /// Resolve a parsed scene document.
    pub fn from_json_value(json: serde_json::Value, base_dir: Option<&Path>) -> Result<Scene, Error> {
        let explicit_rest_density = json
            .get("params")
            .and_then(|p| p.get("rest_density"))
            .is_some();
        let mut spec: SceneSpec =
            serde_json::from_value(json).map_err(|e| Error::format(format!("scene schema: {e}")))?;
        if !explicit_rest_density {
            spec.params.recalibrate_rest_density();
        }
        Self::from_spec(spec, base_dir)
    }

    /// Resolve a spec built in code. `rest_density` is taken as given.
    pub fn from_spec(spec: SceneSpec, base_dir: Option<&Path>) -> Result<Scene, Error> {
        spec.params.validate()?;
        let mut objects = Vec::with_capacity(spec.objects.len());
        for obj in &spec.objects {
            let shape = obj
                .shape
                .bake(base_dir)
                .map_err(|e| e.prefixed(&format!("object {:?}", obj.name)))?;
            let mut keyframes: Vec<(f64, RigidPose)> = if obj.keyframes.is_empty() {
                vec![(0.0, obj.pose.to_pose())]
            } else {
                obj.keyframes.iter().map(|k| (k.frame, k.pose.to_pose())).collect()
            };
            keyframes.sort_by(|a, b| a.0.total_cmp(&b.0));
            if keyframes.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::invalid(format!(
                    "object {:?} has duplicate keyframe frames",
                    obj.name
                )));
            }
            let bindings: Result<Vec<Binding>, Error> = obj.bindings.iter().map(BindingSpec::build).collect();
            let bindings = bindings?;
            for b in &bindings {
                if b.channel >= spec.channels {
                    return Err(Error::invalid(format!(
                        "object {:?} binds channel {} but the scene declares {} channel(s)",
                        obj.name, b.channel, spec.channels
                    )));
                }
            }
            objects.push(SceneObject { name: obj.name.clone(), shape, keyframes, bindings });
        }

        let spacing = spec.params.rest_spacing();
        let mut fluid = ParticleState::new();
        for fill in &spec.fluid {
            let part = match fill {
                FillSpec::Box { min, max } => {
                    fill_box(Vector3::from(*min), Vector3::from(*max), spacing, spec.params.particle_mass)?
                }
                FillSpec::ShapeInterior { shape, pose, margin, min, max } => {
                    let baked = shape.bake(base_dir)?;
                    let to_local = pose.to_pose();
                    fill_where(
                        Vector3::from(*min),
                        Vector3::from(*max),
                        spacing,
                        spec.params.particle_mass,
                        |p| baked.distance(to_local.inverse_point(p)) < -margin,
                    )?
                }
            };
            fluid.extend(&part);
        }
        fluid.validate()?;

        let camera = spec.camera.as_ref().map(CameraSpec::build).transpose()?;

        if let Some(loss) = &spec.loss {
            let object_exists = |name: &str| objects.iter().any(|o| o.name == name);
            match loss {
                LossSpec::Plate { target } => {
                    if !target.iter().all(|v| v.is_finite()) {
                        return Err(Error::invalid("plate loss target must be finite"));
                    }
                }
                LossSpec::Pour { lip_point, target_fraction, cup_object, rotation_channel } => {
                    if !lip_point.iter().all(|v| v.is_finite()) {
                        return Err(Error::invalid("pour lip point must be finite"));
                    }
                    if !(*target_fraction > 0.0 && *target_fraction <= 1.0) {
                        return Err(Error::invalid(format!(
                            "pour target fraction must be in (0, 1], got {target_fraction}"
                        )));
                    }
                    if !object_exists(cup_object) {
                        return Err(Error::invalid(format!("pour loss names unknown object {cup_object:?}")));
                    }
                    if *rotation_channel >= spec.channels {
                        return Err(Error::invalid(format!(
                            "pour loss channel {rotation_channel} out of range ({} declared)",
                            spec.channels
                        )));
                    }
                }
                LossSpec::Catch { cup_object, translation_channel, rim_height, weight_c } => {
                    if !object_exists(cup_object) {
                        return Err(Error::invalid(format!("catch loss names unknown object {cup_object:?}")));
                    }
                    if *translation_channel >= spec.channels {
                        return Err(Error::invalid(format!(
                            "catch loss channel {translation_channel} out of range ({} declared)",
                            spec.channels
                        )));
                    }
                    if !(rim_height.is_finite() && weight_c.is_finite() && *weight_c >= 0.0) {
                        return Err(Error::invalid("catch loss constants must be finite, weight >= 0"));
                    }
                }
            }
        }

        if !(spec.control_bound.is_finite() && spec.control_bound > 0.0) {
            return Err(Error::invalid(format!(
                "control bound must be finite and > 0, got {}",
                spec.control_bound
            )));
        }

        Ok(Scene {
            params: spec.params,
            duration_frames: spec.duration_frames,
            fluid,
            objects,
            channel_count: spec.channels,
            control_bound: spec.control_bound,
            camera,
            loss: spec.loss.clone(),
            spec,
        })
    }

    /// Resolve a built-in scene by name.
    pub fn from_builtin(name: &str) -> Result<Scene, Error> {
        let spec = SceneSpec::builtin(name).ok_or_else(|| {
            Error::invalid(format!(
                "unknown scene {name:?}; built-ins: {}",
                SceneSpec::builtin_names().join(", ")
            ))
        })?;
        Self::from_spec(spec, None)
    }

    /// The collider set at a (possibly fractional) frame, with bindings
    /// attached for the scene's control channels.
    pub fn objects_at(&self, frame: f64) -> SdfObjectSet {
        let posed = self
            .objects
            .iter()
            .map(|o| PosedSdf { shape: o.shape.clone(), base: o.pose_at(frame), bindings: o.bindings.clone() })
            .collect();
        SdfObjectSet::new(posed, self.channel_count)
    }

    /// Index of a named object.
    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    /// All-zero control channel values.
    pub fn initial_channels(&self) -> Vec<f64> {
        vec![0.0; self.channel_count]
    }
}

impl Error {
    /// Prepend a context label to the message, keeping the kind.
    pub(crate) fn prefixed(self, context: &str) -> Error {
        let kind = self.kind();
        let message = format!("{context}: {self}");
        match kind {
            crate::ErrorKind::Invalid => Error::invalid(message),
            crate::ErrorKind::Numeric => Error::numeric(message),
            crate::ErrorKind::Io => Error::io(message),
            crate::ErrorKind::Format => Error::format(message),
        }
    }
}

fn pose_t(translation: [f64; 3]) -> PoseSpec {
    PoseSpec { translation, ..Default::default() }
}

fn pose_rz(translation: [f64; 3], angle_deg: f64) -> PoseSpec {
    PoseSpec { translation, axis: [0.0, 0.0, 1.0], angle_deg }
}

fn floor_object() -> ObjectSpec {
    ObjectSpec {
        name: "floor".into(),
        shape: ShapeSpec::Plane { normal: [0.0, 1.0, 0.0], offset: 0.0 },
        pose: PoseSpec::default(),
        keyframes: vec![],
        bindings: vec![],
    }
}

/// The source cup shared by the pouring and catching scenes.
fn source_cup_shape() -> ShapeSpec {
    ShapeSpec::Cup { inner_radius: 0.16, wall: 0.02, inner_depth: 0.34, base: 0.02, cell: 0.008 }
}

/// Cylindrical fill region holding 174 particles at the default spacing,
/// centered on a cup whose outside bottom center sits at `cup_base`.
fn cup_fill(cup_base: [f64; 3]) -> FillSpec {
    let center = [cup_base[0], cup_base[1] + 0.17, cup_base[2]];
    FillSpec::ShapeInterior {
        shape: ShapeSpec::Cylinder { radius: 0.155, half_height: 0.13 },
        pose: pose_t(center),
        margin: 0.0,
        min: [center[0] - 0.15, center[1] - 0.125, center[2] - 0.15],
        max: [center[0] + 0.15, center[1] + 0.1251, center[2] + 0.15],
    }
}

/// Keyframed source-cup trajectory for the catching scenes. `mirror` flips
/// the x axis and rotation sign; `switch` reverses direction mid-episode.
fn catch_cup_keyframes(mirror: bool, switch: bool) -> Vec<KeyframeSpec> {
    let base: Vec<(f64, f64, f64)> = if switch {
        vec![
            (0.0, -0.55, 0.0),
            (30.0, -0.45, 0.0),
            (60.0, -0.25, -45.0),
            (120.0, 0.10, -60.0),
            (200.0, -0.40, -75.0),
            (240.0, -0.50, -75.0),
        ]
    } else {
        vec![
            (0.0, -0.55, 0.0),
            (30.0, -0.45, 0.0),
            (60.0, -0.30, -45.0),
            (200.0, 0.35, -75.0),
            (240.0, 0.45, -75.0),
        ]
    };
    let sign = if mirror { -1.0 } else { 1.0 };
    base.into_iter()
        .map(|(frame, x, angle)| KeyframeSpec {
            frame,
            pose: pose_rz([sign * x, 1.1, 0.0], sign * angle),
        })
        .collect()
}

fn catch_scene(name: &str, mirror: bool, switch: bool) -> SceneSpec {
    let keyframes = catch_cup_keyframes(mirror, switch);
    let start = keyframes[0].pose.translation;
    SceneSpec {
        name: name.into(),
        duration_frames: 240,
        params: FluidParams::default(),
        fluid: vec![cup_fill(start)],
        objects: vec![
            ObjectSpec {
                name: "source_cup".into(),
                shape: source_cup_shape(),
                pose: PoseSpec::default(),
                keyframes,
                bindings: vec![],
            },
            ObjectSpec {
                name: "target_cup".into(),
                shape: ShapeSpec::Cup { inner_radius: 0.20, wall: 0.02, inner_depth: 0.28, base: 0.02, cell: 0.008 },
                pose: PoseSpec::default(),
                keyframes: vec![],
                bindings: vec![BindingSpec {
                    channel: 0,
                    motion: MotionSpec::TranslateAlongAxis { axis: [1.0, 0.0, 0.0] },
                }],
            },
            floor_object(),
        ],
        channels: 1,
        control_bound: 1.5,
        camera: Some(CameraSpec {
            fx: 100.0,
            fy: 100.0,
            cx: None,
            cy: None,
            width: 80,
            height: 60,
            pose: PoseSpec { translation: [0.0, 0.9, 3.0], axis: [0.0, 1.0, 0.0], angle_deg: 180.0 },
        }),
        loss: Some(LossSpec::Catch {
            cup_object: "target_cup".into(),
            translation_channel: 0,
            rim_height: 0.30,
            weight_c: 2.0,
        }),
    }
}

impl SceneSpec {
    /// Names of the built-in scenes shipped with the engine.
    pub fn builtin_names() -> Vec<&'static str> {
        vec![
            "block_drop",
            "ladle",
            "plate",
            "pour",
            "catch",
            "catch_reverse",
            "catch_switch",
            "catch_switch_reverse",
        ]
    }

    /// Construct a built-in scene spec. These are the same documents shipped
    /// as JSON files in the repo's `scenes/` directory.
    pub fn builtin(name: &str) -> Option<SceneSpec> {
        match name {
            // A 2,028-particle block dropped onto a floor plane; the stock
            // benchmark for settling, comparison metrics, and throughput.
            "block_drop" => Some(SceneSpec {
                name: "block_drop".into(),
                duration_frames: 300,
                params: FluidParams::default(),
                fluid: vec![FillSpec::Box { min: [0.0, 0.3, 0.0], max: [0.6, 0.85, 0.6] }],
                objects: vec![floor_object()],
                channels: 0,
                control_bound: 1.0,
                camera: Some(CameraSpec {
                    fx: 150.0,
                    fy: 150.0,
                    cx: None,
                    cy: None,
                    width: 160,
                    height: 120,
                    pose: PoseSpec { translation: [0.3, 0.5, 2.5], axis: [0.0, 1.0, 0.0], angle_deg: 180.0 },
                }),
                loss: None,
            }),
            // 180 particles dropped off-center into an open basin; sloshes
            // for ten seconds. The stock parameter-identification scene.
            "ladle" => Some(SceneSpec {
                name: "ladle".into(),
                duration_frames: 620,
                params: FluidParams::default(),
                fluid: vec![FillSpec::ShapeInterior {
                    shape: ShapeSpec::Box { half_extents: [0.16, 0.135, 0.16] },
                    pose: pose_t([0.05, 0.185, 0.0]),
                    margin: 0.0,
                    min: [-0.11, 0.05, -0.16],
                    max: [0.21, 0.32, 0.16],
                }],
                objects: vec![
                    ObjectSpec {
                        name: "basin".into(),
                        shape: ShapeSpec::OpenBox {
                            inner_half_extents: [0.25, 0.15, 0.25],
                            wall: 0.03,
                            cell: 0.01,
                        },
                        pose: PoseSpec::default(),
                        keyframes: vec![],
                        bindings: vec![],
                    },
                    floor_object(),
                ],
                channels: 0,
                control_bound: 1.0,
                camera: Some(CameraSpec {
                    fx: 180.0,
                    fy: 180.0,
                    cx: None,
                    cy: None,
                    width: 160,
                    height: 120,
                    pose: PoseSpec { translation: [0.05, 0.35, 2.2], axis: [0.0, 1.0, 0.0], angle_deg: 180.0 },
                }),
                loss: None,
            }),
            // A 2,048-particle block on a tiltable plate; two rotation
            // channels steer the runoff toward a target point.
            "plate" => Some(SceneSpec {
                name: "plate".into(),
                duration_frames: 150,
                params: FluidParams::default(),
                fluid: vec![FillSpec::Box { min: [-0.375, 1.06, -0.375], max: [0.375, 1.41, 0.375] }],
                objects: vec![ObjectSpec {
                    name: "plate".into(),
                    shape: ShapeSpec::Cylinder { radius: 0.75, half_height: 0.03 },
                    pose: pose_t([0.0, 1.0, 0.0]),
                    keyframes: vec![],
                    bindings: vec![
                        BindingSpec {
                            channel: 0,
                            motion: MotionSpec::RotateAboutAxis { axis: [1.0, 0.0, 0.0], pivot: [0.0, 1.0, 0.0] },
                        },
                        BindingSpec {
                            channel: 1,
                            motion: MotionSpec::RotateAboutAxis { axis: [0.0, 0.0, 1.0], pivot: [0.0, 1.0, 0.0] },
                        },
                    ],
                }],
                channels: 2,
                control_bound: 1.0,
                camera: None,
                loss: Some(LossSpec::Plate { target: [1.8, 0.4, 0.0] }),
            }),
            // 174 particles in an elevated cup that rotates about its lip;
            // the task pours a target fraction onto the floor, then rights
            // the cup.
            "pour" => Some(SceneSpec {
                name: "pour".into(),
                duration_frames: 400,
                params: FluidParams::default(),
                fluid: vec![cup_fill([0.0, 0.4, 0.0])],
                objects: vec![
                    ObjectSpec {
                        name: "cup".into(),
                        shape: source_cup_shape(),
                        pose: pose_t([0.0, 0.4, 0.0]),
                        keyframes: vec![],
                        bindings: vec![BindingSpec {
                            channel: 0,
                            motion: MotionSpec::RotateAboutAxis {
                                axis: [0.0, 0.0, 1.0],
                                pivot: [-0.17, 0.76, 0.0],
                            },
                        }],
                    },
                    floor_object(),
                ],
                channels: 1,
                control_bound: 1.0,
                camera: None,
                loss: Some(LossSpec::Pour {
                    lip_point: [-0.17, 0.76, 0.0],
                    target_fraction: 0.5,
                    cup_object: "cup".into(),
                    rotation_channel: 0,
                }),
            }),
            // A keyframed cup pours while traversing; a control channel
            // slides the target cup along x to catch the stream.
            "catch" => Some(catch_scene("catch", false, false)),
            "catch_reverse" => Some(catch_scene("catch_reverse", true, false)),
            "catch_switch" => Some(catch_scene("catch_switch", false, true)),
            "catch_switch_reverse" => Some(catch_scene("catch_switch_reverse", true, true)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cup_bake_matches_analytic_csg_away_from_nodes() {
        let spec = ShapeSpec::Cup { inner_radius: 0.16, wall: 0.02, inner_depth: 0.34, base: 0.02, cell: 0.008 };
        let baked = spec.bake(None).unwrap();
        // Probes inside the baked region track the analytic field.
        let probes = [
            Vector3::new(0.0, 0.2, 0.0),     // cavity air
            Vector3::new(0.17, 0.18, 0.0),   // inside the wall
            Vector3::new(0.0, 0.01, 0.0),    // inside the base
            Vector3::new(0.20, 0.18, 0.0),   // just outside the wall
            Vector3::new(0.0, 0.37, 0.0),    // just above the opening
        ];
        for p in probes {
            let exact = cup_distance(p, 0.16, 0.02, 0.34, 0.02);
            let got = baked.distance(p);
            assert!((got - exact).abs() < 0.008, "at {p:?}: grid {got} vs exact {exact}");
            assert_eq!(got.signum(), exact.signum(), "sign flip at {p:?}");
        }
        // Outside the baked region the field stays positive and keeps
        // growing with distance (conservative far field).
        let inside = baked.distance(Vector3::new(0.0, 0.1, 0.0));
        let above = baked.distance(Vector3::new(0.0, 0.7, 0.0));
        let far = baked.distance(Vector3::new(0.0, 1.5, 0.0));
        assert!(inside > 0.0 && above > inside && far > above);
    }

    #[test]
    fn open_box_bake_separates_cavity_wall_and_outside() {
        let spec = ShapeSpec::OpenBox { inner_half_extents: [0.25, 0.15, 0.25], wall: 0.03, cell: 0.01 };
        let baked = spec.bake(None).unwrap();
        assert!(baked.distance(Vector3::new(0.0, 0.15, 0.0)) > 0.0, "cavity is air");
        assert!(baked.distance(Vector3::new(0.265, 0.15, 0.0)) < 0.0, "wall is solid");
        assert!(baked.distance(Vector3::new(0.0, 0.015, 0.0)) < 0.0, "base is solid");
        assert!(baked.distance(Vector3::new(0.5, 0.1, 0.0)) > 0.0, "outside is air");
        assert!(baked.distance(Vector3::new(0.0, 0.6, 0.0)) > 0.0, "open top");
    }

    #[test]
    fn keyframes_clamp_and_interpolate() {
        let object = SceneObject {
            name: "mover".into(),
            shape: SdfShape::Sphere { radius: 0.1 },
            keyframes: vec![
                (10.0, RigidPose::from_translation(Vector3::new(0.0, 0.0, 0.0))),
                (20.0, RigidPose::from_translation(Vector3::new(1.0, 0.0, 0.0))),
                (40.0, RigidPose::from_translation(Vector3::new(1.0, 2.0, 0.0))),
            ],
            bindings: vec![],
        };
        assert_eq!(object.pose_at(0.0).translation(), Vector3::zeros());
        assert_eq!(object.pose_at(10.0).translation(), Vector3::zeros());
        assert_relative_eq!(object.pose_at(15.0).translation(), Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(object.pose_at(30.0).translation(), Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
        assert_eq!(object.pose_at(99.0).translation(), Vector3::new(1.0, 2.0, 0.0));
    }

    #[test]
    fn ladle_fill_count_matches_independent_interior_scan() {
        let scene = Scene::from_builtin("ladle").unwrap();
        // Independent scan: walk the same lattice and test box membership
        // analytically instead of through the shape/fill machinery.
        let spacing = scene.params.rest_spacing();
        let (center, he) = (Vector3::new(0.05, 0.185, 0.0), Vector3::new(0.16, 0.135, 0.16));
        let (min, max) = (Vector3::new(-0.11, 0.05, -0.16), Vector3::new(0.21, 0.32, 0.16));
        let mut count = 0;
        let steps: Vec<i64> = (0..3).map(|a| ((max[a] - min[a]) / spacing + 1e-9).floor() as i64).collect();
        for kx in 0..=steps[0] {
            for ky in 0..=steps[1] {
                for kz in 0..=steps[2] {
                    let p = min + Vector3::new(kx as f64, ky as f64, kz as f64) * spacing;
                    let d = p - center;
                    if d.x.abs() < he.x && d.y.abs() < he.y && d.z.abs() < he.z {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(scene.fluid.len(), count);
        assert_eq!(scene.fluid.len(), 180);
        // Every particle starts inside the basin cavity, above its floor.
        let objects = scene.objects_at(0.0);
        for p in &scene.fluid.positions {
            assert!(objects.distance(*p, &[]) > 0.0, "particle inside a wall at {p:?}");
        }
    }

    #[test]
    fn builtin_particle_counts_are_pinned() {
        for (name, count) in [("block_drop", 2028), ("plate", 2048), ("pour", 174), ("catch", 174)] {
            let scene = Scene::from_builtin(name).unwrap();
            assert_eq!(scene.fluid.len(), count, "{name}");
        }
    }

    #[test]
    fn builtin_specs_round_trip_through_json() {
        for name in SceneSpec::builtin_names() {
            let spec = SceneSpec::builtin(name).unwrap();
            let json = serde_json::to_string_pretty(&spec).unwrap();
            let back: SceneSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, spec, "{name}");
            Scene::from_spec(back, None).unwrap();
        }
    }

    #[test]
    fn scene_load_applies_defaults_and_recalibrates_rest_density() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.json");
        std::fs::write(
            &path,
            r#"{
                "name": "wide",
                "duration_frames": 10,
                "params": {"cutoff_h": 0.2},
                "fluid": [{"type": "box", "min": [0, 0, 0], "max": [0.2, 0.2, 0.2]}]
            }"#,
        )
        .unwrap();
        let scene = Scene::load(&path).unwrap();
        assert_eq!(scene.params.cutoff_h, 0.2);
        let expected = crate::state::rest_density_for(0.2, 0.5, 0.1);
        assert_eq!(scene.params.rest_density, expected);
        assert_ne!(scene.params.rest_density, FluidParams::default().rest_density);
        // Spacing follows cutoff_h: 0.1 spacing over a 0.2 box is 3 points per axis.
        assert_eq!(scene.fluid.len(), 27);

        // An explicit rest_density is preserved.
        std::fs::write(
            &path,
            r#"{"name": "w2", "duration_frames": 1, "params": {"cutoff_h": 0.2, "rest_density": 123.0}}"#,
        )
        .unwrap();
        assert_eq!(Scene::load(&path).unwrap().params.rest_density, 123.0);
    }

    #[test]
    fn invalid_scenes_are_rejected_with_context() {
        // Unbound channel.
        let mut spec = SceneSpec::builtin("plate").unwrap();
        spec.channels = 1;
        let err = Scene::from_spec(spec, None).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Invalid);
        assert!(err.to_string().contains("channel"), "{err}");

        // Loss naming a missing object.
        let mut spec = SceneSpec::builtin("pour").unwrap();
        spec.objects.retain(|o| o.name != "cup");
        let err = Scene::from_spec(spec, None).unwrap_err();
        assert!(err.to_string().contains("cup"), "{err}");

        // Duplicate keyframes.
        let mut spec = SceneSpec::builtin("catch").unwrap();
        spec.objects[0].keyframes[1].frame = 0.0;
        let err = Scene::from_spec(spec, None).unwrap_err();
        assert!(err.to_string().contains("keyframe"), "{err}");

        // Malformed JSON names the file.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{ not json").unwrap();
        let err = Scene::load(&path).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Format);
        assert!(err.to_string().contains("broken.json"), "{err}");
    }

    #[test]
    fn objects_at_applies_keyframes_and_keeps_bindings() {
        let scene = Scene::from_builtin("catch").unwrap();
        let at0 = scene.objects_at(0.0);
        let at120 = scene.objects_at(120.0);
        let idx = scene.object_index("source_cup").unwrap();
        let p = Vector3::new(-0.55, 1.2, 0.0);
        // The source cup moves away from its start, so the distance from a
        // point near the start grows.
        assert!(at120.objects[idx].distance(p, &[0.0]) > at0.objects[idx].distance(p, &[0.0]));
        // The target cup responds to its translation channel.
        let t = scene.object_index("target_cup").unwrap();
        let q = Vector3::new(0.5, 0.1, 0.0);
        let moved = at0.objects[t].distance(q, &[0.5]);
        let still = at0.objects[t].distance(q, &[0.0]);
        assert!(moved < still, "sliding the cup toward the probe must reduce distance");
        assert_eq!(at0.channel_count, 1);
    }

    #[test]
    fn camera_spec_places_scene_points_in_view() {
        let scene = Scene::from_builtin("block_drop").unwrap();
        let camera = scene.camera.clone().unwrap();
        // The fluid centroid projects inside the image.
        let mut centroid = Vector3::zeros();
        for p in &scene.fluid.positions {
            centroid += p;
        }
        centroid /= scene.fluid.len() as f64;
        let (u, v, z) = camera.project(centroid).expect("centroid in front of camera");
        assert!(z > 0.0);
        assert!(u > 0.0 && u < camera.width as f64);
        assert!(v > 0.0 && v < camera.height as f64);
    }
}
