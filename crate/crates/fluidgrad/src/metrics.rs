//! Particle-set and run comparison metrics.
//!
//! Two particle sets are compared with a symmetric neighbor-count
//! intersection-over-union: a particle intersects if it has at least one
//! particle of the other set within epsilon, and the union size is the total
//! particle count, so the score sits in [0, 1]. Two recorded runs are
//! compared frame by frame.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;

use crate::io::{list_frames, read_frame, CsvWriter};
use crate::Error;

/// Neighbor radius for the particle IOU.
#[derive(Debug, Clone, Copy)]
pub struct IouConfig {
    /// Match radius in meters.
    pub epsilon: f64,
}

impl Default for IouConfig {
    fn default() -> Self {
        Self { epsilon: 0.025 }
    }
}

impl IouConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!("iou epsilon must be finite and > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Hash grid over one point set at cell size epsilon, so any point within
/// epsilon of a query lies in one of the 27 cells around it.
struct CellIndex<'a> {
    points: &'a [Vector3<f64>],
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    inv_cell: f64,
}

impl<'a> CellIndex<'a> {
    fn build(points: &'a [Vector3<f64>], epsilon: f64) -> Self {
        let inv_cell = 1.0 / epsilon;
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, inv_cell)).or_default().push(i);
        }
        Self { points, cells, inv_cell }
    }

    fn key(p: &Vector3<f64>, inv_cell: f64) -> (i64, i64, i64) {
        (
            (p.x * inv_cell).floor() as i64,
            (p.y * inv_cell).floor() as i64,
            (p.z * inv_cell).floor() as i64,
        )
    }

    /// True when some indexed point lies within eps2 (squared) of `q`.
    fn has_neighbor(&self, q: &Vector3<f64>, eps2: f64) -> bool {
        let (kx, ky, kz) = Self::key(q, self.inv_cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        if bucket.iter().any(|&i| (self.points[i] - q).norm_squared() <= eps2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

/// Symmetric neighbor-count IOU of two particle clouds. Both empty counts as
/// a perfect match.
pub fn particle_iou(a: &[Vector3<f64>], b: &[Vector3<f64>], config: &IouConfig) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let eps2 = config.epsilon * config.epsilon;
    let index_a = CellIndex::build(a, config.epsilon);
    let index_b = CellIndex::build(b, config.epsilon);
    let matched_a = a.iter().filter(|p| index_b.has_neighbor(p, eps2)).count();
    let matched_b = b.iter().filter(|p| index_a.has_neighbor(p, eps2)).count();
    (matched_a + matched_b) as f64 / (a.len() + b.len()) as f64
}

/// Quadratic-time reference implementation of [`particle_iou`]; the
/// accelerated version must agree with it exactly.
pub fn particle_iou_brute(a: &[Vector3<f64>], b: &[Vector3<f64>], config: &IouConfig) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let eps2 = config.epsilon * config.epsilon;
    let matched = |from: &[Vector3<f64>], against: &[Vector3<f64>]| {
        from.iter()
            .filter(|p| against.iter().any(|q| (*q - **p).norm_squared() <= eps2))
            .count()
    };
    (matched(a, b) + matched(b, a)) as f64 / (a.len() + b.len()) as f64
}

/// Frame-by-frame comparison of two recorded runs.
#[derive(Debug, Clone, Serialize)]
pub struct RunComparison {
    /// IOU per frame, in frame order.
    pub per_frame: Vec<f64>,
    /// Mean over frames.
    pub mean: f64,
}

/// Compare the frame dumps of two run directories. The directories must
/// hold the same number of frames; frames are paired in index order.
pub fn run_compare(run_a: &Path, run_b: &Path, config: &IouConfig) -> Result<RunComparison, Error> {
    config.validate()?;
    let frames_a = list_frames(run_a)?;
    let frames_b = list_frames(run_b)?;
    if frames_a.len() != frames_b.len() {
        return Err(Error::invalid(format!(
            "frame-count mismatch: {} holds {} frames, {} holds {}",
            run_a.display(),
            frames_a.len(),
            run_b.display(),
            frames_b.len()
        )));
    }
    if frames_a.is_empty() {
        return Err(Error::invalid(format!("no frames to compare in {}", run_a.display())));
    }
    let per_frame: Result<Vec<f64>, Error> = frames_a
        .par_iter()
        .zip(frames_b.par_iter())
        .map(|(fa, fb)| {
            let a = read_frame(fa)?;
            let b = read_frame(fb)?;
            Ok(particle_iou(&a.positions, &b.positions, config))
        })
        .collect();
    let per_frame = per_frame?;
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(RunComparison { per_frame, mean })
}

impl RunComparison {
    /// Write the per-frame trace as CSV with columns `frame,iou`.
    pub fn save_csv(&self, path: &Path) -> Result<(), Error> {
        let mut w = CsvWriter::create(path, &["frame", "iou"])?;
        for (frame, iou) in self.per_frame.iter().enumerate() {
            w.row(frame, &[*iou])?;
        }
        w.finish()
    }

    /// Write the summary JSON (`mean_iou`, `frames`).
    pub fn save_summary(&self, path: &Path) -> Result<(), Error> {
        let summary = serde_json::json!({
            "mean_iou": self.mean,
            "frames": self.per_frame.len(),
        });
        std::fs::write(path, serde_json::to_string_pretty(&summary).map_err(Error::from)?)
            .map_err(|e| Error::io(format!("writing {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_frame, DumpFormat};
    use crate::state::ParticleState;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cloud(rng: &mut StdRng, n: usize, scale: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()) * scale)
            .collect()
    }

    #[test]
    fn identical_nonempty_clouds_score_one() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = cloud(&mut rng, 40, 0.5);
        assert_eq!(particle_iou(&a, &a, &IouConfig::default()), 1.0);
    }

    #[test]
    fn disjoint_clouds_score_zero_and_empty_pair_scores_one() {
        let mut rng = StdRng::seed_from_u64(8);
        let a = cloud(&mut rng, 25, 0.3);
        let b: Vec<_> = a.iter().map(|p| p + Vector3::new(1.0, 0.0, 0.0)).collect();
        let config = IouConfig::default();
        assert_eq!(particle_iou(&a, &b, &config), 0.0);
        assert_eq!(particle_iou(&[], &[], &config), 1.0);
        // One-sided emptiness: nothing can match.
        assert_eq!(particle_iou(&a, &[], &config), 0.0);
    }

    #[test]
    fn constructed_line_shift_scores_exactly_half() {
        // Ten points 0.1 m apart; shifting by 0.5 m aligns exactly five
        // pairs at distance zero and leaves the rest 0.1 m from anything.
        let a: Vec<Vector3<f64>> = (0..10).map(|k| Vector3::new(k as f64 * 0.1, 0.0, 0.0)).collect();
        let b: Vec<Vector3<f64>> = a.iter().map(|p| p + Vector3::new(0.5, 0.0, 0.0)).collect();
        let config = IouConfig::default();
        assert_eq!(particle_iou(&a, &b, &config), 0.5);
        assert_eq!(particle_iou_brute(&a, &b, &config), 0.5);
    }

    #[test]
    fn accelerated_iou_matches_brute_force_and_is_symmetric() {
        let mut rng = StdRng::seed_from_u64(99);
        for trial in 0..20 {
            let a = cloud(&mut rng, 1 + trial * 3, 0.2);
            let b = cloud(&mut rng, 1 + trial * 2, 0.2);
            let eps = 0.01 + 0.03 * rng.random::<f64>();
            let config = IouConfig { epsilon: eps };
            let fast = particle_iou(&a, &b, &config);
            assert_eq!(fast, particle_iou_brute(&a, &b, &config), "trial {trial}");
            assert_eq!(fast, particle_iou(&b, &a, &config), "symmetry, trial {trial}");
        }
    }

    #[test]
    fn iou_is_monotone_in_epsilon() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = cloud(&mut rng, 60, 0.4);
        let b = cloud(&mut rng, 50, 0.4);
        let mut last = 0.0;
        for eps in [0.005, 0.01, 0.02, 0.05, 0.1, 0.3, 1.0] {
            let iou = particle_iou(&a, &b, &IouConfig { epsilon: eps });
            assert!(iou >= last, "epsilon {eps}: {iou} < {last}");
            last = iou;
        }
        assert_eq!(last, 1.0, "a huge epsilon matches everything");
    }

    #[test]
    fn boundary_distance_counts_as_a_match() {
        let config = IouConfig { epsilon: 0.025 };
        let a = [Vector3::new(0.0, 0.0, 0.0)];
        let b = [Vector3::new(0.025, 0.0, 0.0)];
        assert_eq!(particle_iou(&a, &b, &config), 1.0);
        assert_eq!(particle_iou_brute(&a, &b, &config), 1.0);
    }

    #[test]
    fn run_compare_pairs_frames_and_rejects_mismatch() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let base = cloud(&mut rng, 30, 0.5);
        for frame in 0..4 {
            let offset = frame as f64 * 0.2;
            let pa: Vec<_> = base.iter().map(|p| p + Vector3::new(offset, 0.0, 0.0)).collect();
            write_frame(dir_a.path(), frame, &ParticleState::from_positions(pa.clone(), 0.1), DumpFormat::Csv)
                .unwrap();
            // Run B matches frames 0 and 1 exactly, then drifts far away.
            let pb: Vec<_> = if frame < 2 {
                pa.clone()
            } else {
                pa.iter().map(|p| p + Vector3::new(5.0, 0.0, 0.0)).collect()
            };
            write_frame(dir_b.path(), frame, &ParticleState::from_positions(pb, 0.1), DumpFormat::Csv)
                .unwrap();
        }
        let cmp = run_compare(dir_a.path(), dir_b.path(), &IouConfig::default()).unwrap();
        assert_eq!(cmp.per_frame, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(cmp.mean, 0.5);

        let csv = dir_a.path().join("iou.csv");
        cmp.save_csv(&csv).unwrap();
        let (header, rows) = crate::io::read_csv(&csv).unwrap();
        assert_eq!(header, ["frame", "iou"]);
        assert_eq!(rows.len(), 4);
        let summary = dir_a.path().join("summary.json");
        cmp.save_summary(&summary).unwrap();
        let text = std::fs::read_to_string(&summary).unwrap();
        let json: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(json["mean_iou"], 0.5);
        assert_eq!(json["frames"], 4);

        // Frame-count mismatch is rejected.
        std::fs::remove_file(dir_b.path().join("frame_000003.csv")).unwrap();
        let err = run_compare(dir_a.path(), dir_b.path(), &IouConfig::default()).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Invalid);
    }
}
