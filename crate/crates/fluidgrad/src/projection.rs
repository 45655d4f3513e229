//! Differentiable pinhole projection of particles into a soft silhouette
//! image, plus the two trajectory-fitting losses.
//!
//! Each particle in front of the camera splats a truncated Gaussian around
//! its projected pixel position; the accumulated field S is flattened to
//! I = 2 sigmoid(beta S) - 1 so empty pixels map exactly to 0. The splat is a
//! single tape op whose backward pass routes pixel adjoints to particle
//! world positions through the projection Jacobian, which lets image-space
//! losses drive particle states (and through them, fluid parameters and
//! controls).

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::Vector3;

use crate::autodiff::{Backward, GradSink, Value, Var};
use crate::convsdf::SdfObjectSet;
use crate::pose::RigidPose;
use crate::Error;

/// Pinhole camera: world-to-camera pose plus pixel intrinsics. The camera
/// looks along its local +z axis; a world point maps to
/// u = fx x/z + cx, v = fy y/z + cy in camera coordinates.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera transform.
    pub pose: RigidPose,
}

impl CameraModel {
    /// Camera with the principal point at the image center.
    pub fn centered(fx: f64, fy: f64, width: usize, height: usize, pose: RigidPose) -> Self {
        Self {
            fx,
            fy,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            pose,
        }
    }

    /// Check the camera invariants.
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "camera focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(format!(
                "camera resolution must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::invalid("camera principal point must be finite"));
        }
        Ok(())
    }

    /// Project a world point. Returns (u, v, depth) or None when the point
    /// is not in front of the camera.
    pub fn project(&self, world: Vector3<f64>) -> Option<(f64, f64, f64)> {
        let cam = self.pose.transform_point(world);
        if cam.z <= DEPTH_EPS {
            return None;
        }
        Some((self.fx * cam.x / cam.z + self.cx, self.fy * cam.y / cam.z + self.cy, cam.z))
    }

    /// Camera origin in world coordinates.
    pub fn origin(&self) -> Vector3<f64> {
        self.pose.inverse().translation()
    }
}

/// Splat and flattening parameters.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionConfig {
    /// Gaussian splat radius in pixels; the splat is truncated at 3 sigma.
    pub sigma: f64,
    /// Sigmoid steepness of the flattening I = 2 sigmoid(beta S) - 1.
    pub beta: f64,
    /// When set, particles whose segment to the camera is blocked by an
    /// object contribute nothing.
    pub occlusion: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { sigma: 3.0, beta: 4.0, occlusion: false }
    }
}

/// Points closer than this to the camera plane are treated as behind it.
const DEPTH_EPS: f64 = 1e-9;
/// Minimum sphere-tracing advance per step when testing occlusion, meters.
const OCCLUSION_STEP: f64 = 1e-3;
/// Lift-off distance before occlusion marching starts, so a particle resting
/// exactly on a surface does not occlude itself.
const OCCLUSION_LIFTOFF: f64 = 2e-3;

/// Occluding geometry for visibility tests: the collider set plus the
/// control-channel values at the rendered frame.
#[derive(Clone, Copy)]
pub struct Occluders<'a> {
    pub objects: &'a SdfObjectSet,
    pub channels: &'a [f64],
}

/// True when the segment from `point` to the camera origin is blocked.
fn occluded(point: Vector3<f64>, camera_origin: Vector3<f64>, occ: Occluders<'_>) -> bool {
    let to_cam = camera_origin - point;
    let dist = to_cam.norm();
    if dist <= OCCLUSION_LIFTOFF {
        return false;
    }
    let dir = to_cam / dist;
    let mut t = OCCLUSION_LIFTOFF;
    while t < dist {
        let phi = occ.objects.distance(point + dir * t, occ.channels);
        if phi < 1e-9 {
            return true;
        }
        t += phi.max(OCCLUSION_STEP);
    }
    false
}

/// A particle that survived the visibility tests, with its projection saved
/// for the backward pass.
struct VisibleSplat {
    particle: usize,
    u: f64,
    v: f64,
    cam: Vector3<f64>,
}

struct SplatOp {
    positions: Option<usize>,
    n: usize,
    visible: Vec<VisibleSplat>,
    camera: CameraModel,
    sigma: f64,
}

/// Pixel bounds of the truncated splat around (u, v): inclusive column and
/// row ranges, or None when the splat misses the image entirely.
fn splat_bounds(u: f64, v: f64, sigma: f64, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let r = 3.0 * sigma;
    let c0 = (u - r).ceil().max(0.0);
    let c1 = (u + r).floor().min(width as f64 - 1.0);
    let r0 = (v - r).ceil().max(0.0);
    let r1 = (v + r).floor().min(height as f64 - 1.0);
    if c0 > c1 || r0 > r1 {
        return None;
    }
    Some((c0 as usize, c1 as usize, r0 as usize, r1 as usize))
}

impl Backward for SplatOp {
    fn backward(&self, out_grad: &Value, sink: &mut GradSink) {
        let (w, h) = (self.camera.width, self.camera.height);
        let inv_sig2 = 1.0 / (self.sigma * self.sigma);
        let mut g = Value::zeros(self.n, 3);
        for vis in &self.visible {
            let Some((c0, c1, r0, r1)) = splat_bounds(vis.u, vis.v, self.sigma, w, h) else {
                continue;
            };
            let mut gu = 0.0;
            let mut gv = 0.0;
            for row in r0..=r1 {
                for col in c0..=c1 {
                    let du = vis.u - col as f64;
                    let dv = vis.v - row as f64;
                    let wgt = (-(du * du + dv * dv) * 0.5 * inv_sig2).exp();
                    let go = out_grad.data()[row * w + col];
                    gu += go * wgt * (-du) * inv_sig2;
                    gv += go * wgt * (-dv) * inv_sig2;
                }
            }
            let z = vis.cam.z;
            let gcam = Vector3::new(
                gu * self.camera.fx / z,
                gv * self.camera.fy / z,
                -(gu * self.camera.fx * vis.cam.x + gv * self.camera.fy * vis.cam.y) / (z * z),
            );
            let gworld = self.camera.pose.inverse_vector(gcam);
            for a in 0..3 {
                g.data_mut()[vis.particle * 3 + a] += gworld[a];
            }
        }
        sink.accum(self.positions, &g);
    }
}

/// Accumulate the pre-sigmoid splat field S (height x width) on the tape.
/// Particles behind the camera — and, with `config.occlusion` and a
/// non-empty object set, particles whose view segment is blocked — are
/// skipped.
pub fn splat_particles(
    positions: &Var,
    camera: &CameraModel,
    config: &ProjectionConfig,
    occluders: Option<Occluders<'_>>,
) -> Var {
    assert_eq!(positions.value().cols(), 3, "splat_particles positions must be Nx3");
    assert!(config.sigma > 0.0 && config.beta > 0.0, "projection config must be positive");
    let n = positions.value().rows();
    let (w, h) = (camera.width, camera.height);
    let cam_origin = camera.origin();
    let inv_sig2 = 1.0 / (config.sigma * config.sigma);
    let mut field = Value::zeros(h, w);
    let mut visible = Vec::new();
    for i in 0..n {
        let world = positions.value().row3(i);
        let cam = camera.pose.transform_point(world);
        if cam.z <= DEPTH_EPS {
            continue;
        }
        if config.occlusion {
            if let Some(occ) = occluders {
                if occluded(world, cam_origin, occ) {
                    continue;
                }
            }
        }
        let u = camera.fx * cam.x / cam.z + camera.cx;
        let v = camera.fy * cam.y / cam.z + camera.cy;
        let Some((c0, c1, r0, r1)) = splat_bounds(u, v, config.sigma, w, h) else {
            continue;
        };
        for row in r0..=r1 {
            for col in c0..=c1 {
                let du = u - col as f64;
                let dv = v - row as f64;
                field.data_mut()[row * w + col] += (-(du * du + dv * dv) * 0.5 * inv_sig2).exp();
            }
        }
        visible.push(VisibleSplat { particle: i, u, v, cam });
    }
    let op = SplatOp {
        positions: positions.node_id(),
        n,
        visible,
        camera: camera.clone(),
        sigma: config.sigma,
    };
    positions.tape().make_var(field, positions.is_tracked(), move || Box::new(op))
}

/// Project particles to the flattened silhouette image
/// I = 2 sigmoid(beta S) - 1, each pixel in [0, 1) and exactly 0 where no
/// splat reaches.
pub fn project_particles(
    positions: &Var,
    camera: &CameraModel,
    config: &ProjectionConfig,
    occluders: Option<Occluders<'_>>,
) -> Var {
    splat_particles(positions, camera, config, occluders)
        .scale(config.beta)
        .sigmoid()
        .affine(2.0, -1.0)
}

/// Mean absolute difference over all position and velocity components
/// (6N values).
pub fn l1_state_loss(
    pred_positions: &Var,
    pred_velocities: &Var,
    truth_positions: &Value,
    truth_velocities: &Value,
) -> Result<Var, Error> {
    let n = pred_positions.value().rows();
    if pred_velocities.value().rows() != n
        || truth_positions.rows() != n
        || truth_velocities.rows() != n
    {
        return Err(Error::invalid(format!(
            "state loss needs matching particle counts, got predictions {} / {} and truth {} / {}",
            n,
            pred_velocities.value().rows(),
            truth_positions.rows(),
            truth_velocities.rows()
        )));
    }
    let tape = pred_positions.tape();
    let tp = tape.constant(truth_positions.clone());
    let tv = tape.constant(truth_velocities.clone());
    let total = pred_positions
        .sub(&tp)
        .abs()
        .sum()
        .add(&pred_velocities.sub(&tv).abs().sum());
    Ok(total.scale(1.0 / (6.0 * n as f64).max(1.0)))
}

/// Mean absolute pixel difference between two images of equal resolution.
pub fn projection_loss(pred: &Var, truth: &Var) -> Result<Var, Error> {
    if pred.value().shape() != truth.value().shape() {
        return Err(Error::invalid(format!(
            "projection loss needs equal resolutions, got {:?} and {:?}",
            pred.value().shape(),
            truth.value().shape()
        )));
    }
    let count = pred.value().len().max(1) as f64;
    Ok(pred.sub(truth).abs().sum().scale(1.0 / count))
}

/// Write an image (values in [0,1]) as 8-bit grayscale PNG,
/// pixel = round(255 I).
pub fn write_image_png(path: &Path, image: &Value) -> Result<(), Error> {
    let (h, w) = image.shape();
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::invalid("image buffer size mismatch"))?;
    img.save(path).map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}

/// Write an image losslessly: u32 width, u32 height (little-endian), then
/// height*width f64 pixels row-major.
pub fn write_image_f64(path: &Path, image: &Value) -> Result<(), Error> {
    let (h, w) = image.shape();
    let mut buf = Vec::with_capacity(8 + image.len() * 8);
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    for &x in image.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}: {e}", path.display())))?;
    f.write_all(&buf).map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
}

/// Read an image written by [`write_image_f64`].
pub fn read_image_f64(path: &Path) -> Result<Value, Error> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}: {e}", path.display())))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("reading {}: {e}", path.display())))?;
    if bytes.len() < 8 {
        return Err(Error::format(format!("{}: truncated image header", path.display())));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = w
        .checked_mul(h)
        .and_then(|px| px.checked_mul(8))
        .and_then(|body| body.checked_add(8))
        .ok_or_else(|| Error::format(format!("{}: image dimensions overflow", path.display())))?;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: expected {expected} bytes for {w}x{h}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut img = Value::zeros(h, w);
    for (i, chunk) in bytes[8..].chunks_exact(8).enumerate() {
        img.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(img)
}
