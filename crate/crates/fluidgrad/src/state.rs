//! Particle state, fluid parameters, and lattice region filling.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::Error;

/// Structure-of-arrays particle state: positions, velocities, masses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParticleState {
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
    pub masses: Vec<f64>,
}

impl ParticleState {
    /// Empty state.
    pub fn new() -> Self {
        Self::default()
    }

    /// State with the given positions, zero velocities, and uniform mass.
    pub fn from_positions(positions: Vec<Vector3<f64>>, mass: f64) -> Self {
        let n = positions.len();
        Self { positions, velocities: vec![Vector3::zeros(); n], masses: vec![mass; n] }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Check the state invariants: equal array lengths, finite values,
    /// strictly positive masses.
    pub fn validate(&self) -> Result<(), Error> {
        if self.velocities.len() != self.len() || self.masses.len() != self.len() {
            return Err(Error::invalid(format!(
                "particle arrays disagree: {} positions, {} velocities, {} masses",
                self.len(),
                self.velocities.len(),
                self.masses.len()
            )));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::numeric(format!("non-finite position at index {i}")));
            }
        }
        for (i, v) in self.velocities.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::numeric(format!("non-finite velocity at index {i}")));
            }
        }
        for (i, &m) in self.masses.iter().enumerate() {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::invalid(format!("mass at index {i} must be finite and > 0, got {m}")));
            }
        }
        Ok(())
    }

    /// Append the particles of `other`.
    pub fn extend(&mut self, other: &ParticleState) {
        self.positions.extend_from_slice(&other.positions);
        self.velocities.extend_from_slice(&other.velocities);
        self.masses.extend_from_slice(&other.masses);
    }
}

/// Fluid model parameters.
///
/// `lambda_*` are the four correction strengths; `cutoff_h` is the kernel
/// support radius shared by every kernel and the neighbor search;
/// `rest_fraction` is the rest particle spacing as a fraction of `cutoff_h`;
/// `rest_density` is the density a particle sees at the center of a lattice
/// at rest spacing (see [`rest_density_for`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FluidParams {
    pub lambda_pressure: f64,
    pub lambda_cohesion: f64,
    pub lambda_surface: f64,
    pub lambda_viscosity: f64,
    pub cutoff_h: f64,
    pub rest_fraction: f64,
    pub rest_density: f64,
    pub particle_mass: f64,
    pub gravity: [f64; 3],
    pub dt: f64,
    pub solver_iters: usize,
    /// Dilation step for collision normal differencing, in meters.
    pub collision_dilation: f64,
}

/// Default kernel support radius in meters.
pub const DEFAULT_CUTOFF_H: f64 = 0.1;
/// Default rest spacing as a fraction of the support radius.
pub const DEFAULT_REST_FRACTION: f64 = 0.5;
/// Default particle mass in kilograms.
pub const DEFAULT_PARTICLE_MASS: f64 = 0.1;
/// Default timestep in seconds.
pub const DEFAULT_DT: f64 = 1.0 / 60.0;
/// Default constraint-solver iteration count.
pub const DEFAULT_SOLVER_ITERS: usize = 3;
/// Default collision normal dilation in meters.
pub const DEFAULT_COLLISION_DILATION: f64 = 0.005;
/// Default pressure-correction strength, calibrated as the smallest power of
/// ten for which (a) one constraint loop strictly reduces a compressed
/// block's density overshoot and (b) a block resting on the floor keeps its
/// overshoot below 1% of the rest density over the first five steps. Smaller
/// powers fail (b) — settling compression accumulates — and far smaller ones
/// fail (a); one order of magnitude higher makes splash impacts diverge.
/// The calibration test in `pbf` pins this value.
pub const DEFAULT_LAMBDA_PRESSURE: f64 = 1e-9;
/// Default cohesion strength (center of the usual identification range).
pub const DEFAULT_LAMBDA_COHESION: f64 = 0.1;
/// Default surface-tension strength: the largest power of ten that does not
/// self-accelerate a resting blob (at 1e-1 a blob at rest spontaneously
/// gains tens of m/s in the first frames).
pub const DEFAULT_LAMBDA_SURFACE: f64 = 1e-2;
/// Default viscosity strength (center of the usual identification range).
pub const DEFAULT_LAMBDA_VISCOSITY: f64 = 60.0;

impl Default for FluidParams {
    fn default() -> Self {
        let cutoff_h = DEFAULT_CUTOFF_H;
        let rest_fraction = DEFAULT_REST_FRACTION;
        let particle_mass = DEFAULT_PARTICLE_MASS;
        Self {
            lambda_pressure: DEFAULT_LAMBDA_PRESSURE,
            lambda_cohesion: DEFAULT_LAMBDA_COHESION,
            lambda_surface: DEFAULT_LAMBDA_SURFACE,
            lambda_viscosity: DEFAULT_LAMBDA_VISCOSITY,
            cutoff_h,
            rest_fraction,
            rest_density: rest_density_for(cutoff_h, rest_fraction, particle_mass),
            particle_mass,
            gravity: [0.0, -9.8, 0.0],
            dt: DEFAULT_DT,
            solver_iters: DEFAULT_SOLVER_ITERS,
            collision_dilation: DEFAULT_COLLISION_DILATION,
        }
    }
}

impl FluidParams {
    /// Rest particle spacing in meters.
    pub fn rest_spacing(&self) -> f64 {
        self.cutoff_h * self.rest_fraction
    }

    /// Gravity as a vector.
    pub fn gravity_vec(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    /// Recompute `rest_density` from the current `cutoff_h`, `rest_fraction`,
    /// and `particle_mass`.
    pub fn recalibrate_rest_density(&mut self) {
        self.rest_density = rest_density_for(self.cutoff_h, self.rest_fraction, self.particle_mass);
    }

    /// Check parameter invariants.
    pub fn validate(&self) -> Result<(), Error> {
        let positives = [
            ("cutoff_h", self.cutoff_h),
            ("rest_fraction", self.rest_fraction),
            ("rest_density", self.rest_density),
            ("particle_mass", self.particle_mass),
            ("dt", self.dt),
            ("collision_dilation", self.collision_dilation),
        ];
        for (name, v) in positives {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        let finites = [
            ("lambda_pressure", self.lambda_pressure),
            ("lambda_cohesion", self.lambda_cohesion),
            ("lambda_surface", self.lambda_surface),
            ("lambda_viscosity", self.lambda_viscosity),
        ];
        for (name, v) in finites {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return Err(Error::invalid("gravity must be finite".to_string()));
        }
        if self.solver_iters == 0 {
            return Err(Error::invalid("solver_iters must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Density seen by the center particle of an infinite lattice at rest spacing
/// `rest_fraction * h`, using the density kernel. Because the kernel support
/// is `h`, only lattice points within distance `h` contribute.
pub fn rest_density_for(h: f64, rest_fraction: f64, mass: f64) -> f64 {
    let spacing = h * rest_fraction;
    let reach = (h / spacing).ceil() as i64 + 1;
    let mut density = 0.0;
    for kx in -reach..=reach {
        for ky in -reach..=reach {
            for kz in -reach..=reach {
                let p = Vector3::new(kx as f64, ky as f64, kz as f64) * spacing;
                let d = p.norm();
                if d <= h {
                    density += mass * crate::convsp::kernel_density(d, h);
                }
            }
        }
    }
    density
}

/// Fill the axis-aligned box `[min, max]` with a cubic lattice of particles
/// at the given spacing, anchored at `min`. Both faces are inclusive: a
/// zero-volume box yields exactly one particle.
pub fn fill_box(
    min: Vector3<f64>,
    max: Vector3<f64>,
    spacing: f64,
    mass: f64,
) -> Result<ParticleState, Error> {
    fill_where(min, max, spacing, mass, |_| true)
}

/// Fill the lattice over `[min, max]` keeping only points where `keep`
/// returns true. The lattice is anchored at `min`; the upper face is
/// inclusive up to a 1e-9 relative tolerance so that exact multiples of the
/// spacing are kept.
pub fn fill_where(
    min: Vector3<f64>,
    max: Vector3<f64>,
    spacing: f64,
    mass: f64,
    keep: impl Fn(Vector3<f64>) -> bool,
) -> Result<ParticleState, Error> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::invalid(format!("fill spacing must be finite and > 0, got {spacing}")));
    }
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::invalid(format!("fill mass must be finite and > 0, got {mass}")));
    }
    for a in 0..3 {
        if min[a] > max[a] {
            return Err(Error::invalid(format!(
                "fill region is inverted on axis {a}: min {} > max {}",
                min[a], max[a]
            )));
        }
    }
    let counts: Vec<i64> = (0..3)
        .map(|a| ((max[a] - min[a]) / spacing + 1e-9).floor() as i64)
        .collect();
    let mut positions = Vec::new();
    for kx in 0..=counts[0] {
        for ky in 0..=counts[1] {
            for kz in 0..=counts[2] {
                let p = min + Vector3::new(kx as f64, ky as f64, kz as f64) * spacing;
                if keep(p) {
                    positions.push(p);
                }
            }
        }
    }
    Ok(ParticleState::from_positions(positions, mass))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_box_at_half_spacing_has_27_particles() {
        let state = fill_box(Vector3::zeros(), Vector3::new(0.1, 0.1, 0.1), 0.05, 0.1).unwrap();
        assert_eq!(state.len(), 27);
        state.validate().unwrap();
        for p in &state.positions {
            for c in p.iter() {
                assert!((-1e-12..=0.1 + 1e-12).contains(c));
            }
        }
    }

    #[test]
    fn zero_volume_box_yields_one_particle() {
        let at = Vector3::new(0.3, -0.2, 1.0);
        let state = fill_box(at, at, 0.05, 0.1).unwrap();
        assert_eq!(state.len(), 1);
        assert_eq!(state.positions[0], at);
    }

    #[test]
    fn non_positive_spacing_is_rejected() {
        assert!(fill_box(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0), 0.0, 0.1).is_err());
        assert!(fill_box(Vector3::zeros(), Vector3::new(1.0, 1.0, 1.0), -0.1, 0.1).is_err());
    }

    #[test]
    fn fill_where_matches_brute_force_predicate_scan() {
        let keep = |p: Vector3<f64>| (p - Vector3::new(0.2, 0.2, 0.2)).norm() < 0.15;
        let state =
            fill_where(Vector3::zeros(), Vector3::new(0.4, 0.4, 0.4), 0.05, 0.1, keep).unwrap();
        let mut expected = 0;
        for kx in 0..=8 {
            for ky in 0..=8 {
                for kz in 0..=8 {
                    let p = Vector3::new(kx as f64, ky as f64, kz as f64) * 0.05;
                    if keep(p) {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(state.len(), expected);
        assert!(state.positions.iter().all(|&p| keep(p)));
    }

    #[test]
    fn rest_density_matches_direct_lattice_sum() {
        let h = 0.1;
        let mass = 0.1;
        let rho0 = rest_density_for(h, 0.5, mass);
        // Direct sum over the 3x3x3 / shell structure around the center:
        // offsets at distance 0, 0.05, 0.05*sqrt(2), 0.05*sqrt(3), 0.1 (zero weight).
        let w = |d: f64| crate::convsp::kernel_density(d, h);
        let s = 0.05;
        let direct = mass
            * (w(0.0)
                + 6.0 * w(s)
                + 12.0 * w(s * 2.0_f64.sqrt())
                + 8.0 * w(s * 3.0_f64.sqrt())
                + 6.0 * w(2.0 * s));
        assert_relative_eq!(rho0, direct, max_relative = 1e-12);
        assert!(rho0 > 0.0);
    }

    #[test]
    fn validate_flags_bad_masses_and_lengths() {
        let mut state = ParticleState::from_positions(vec![Vector3::zeros()], 0.1);
        state.masses[0] = 0.0;
        assert!(state.validate().is_err());
        let mut state = ParticleState::from_positions(vec![Vector3::zeros()], 0.1);
        state.velocities.push(Vector3::zeros());
        assert!(state.validate().is_err());
    }

    #[test]
    fn default_params_validate() {
        FluidParams::default().validate().unwrap();
    }
}
