//! Fixed-radius neighbor search on a spatial hash grid.
//!
//! Cell size equals the query radius `h`, so all neighbors of a point lie in
//! its 27 surrounding cells. Neighbor lists are stored CSR-style, sorted by
//! index, with the boundary inclusive (d <= h). Construction is parallel over
//! particles but each per-particle list is built and sorted independently, so
//! results are identical at any thread count.

use std::collections::HashMap;
use std::rc::Rc;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::autodiff::Value;
use crate::Error;

/// Threshold below which the parallel build is not worth the overhead.
const PARALLEL_MIN_PARTICLES: usize = 512;

/// Spatial hash grid over a fixed particle snapshot.
pub struct NeighborGrid {
    h: f64,
    positions: Rc<Value>,
    offsets: Vec<usize>,
    nbrs: Vec<u32>,
    dists: Vec<f64>,
    cells: HashMap<[i64; 3], Vec<u32>>,
}

fn cell_of(p: Vector3<f64>, h: f64) -> [i64; 3] {
    [(p.x / h).floor() as i64, (p.y / h).floor() as i64, (p.z / h).floor() as i64]
}

impl NeighborGrid {
    /// Build the grid and all neighbor lists for an Nx3 position snapshot.
    pub fn build(positions: Rc<Value>, h: f64) -> Result<Self, Error> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid(format!("neighbor radius must be finite and > 0, got {h}")));
        }
        assert_eq!(positions.cols(), 3, "neighbor grid needs an Nx3 position array");
        let n = positions.rows();
        if n > u32::MAX as usize {
            return Err(Error::invalid(format!("too many particles for neighbor grid: {n}")));
        }
        if !positions.is_finite() {
            return Err(Error::numeric("non-finite position passed to neighbor grid".to_string()));
        }
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for i in 0..n {
            cells.entry(cell_of(positions.row3(i), h)).or_default().push(i as u32);
        }

        let pos: &Value = &positions;
        let collect_one = |i: usize| -> Vec<(u32, f64)> {
            let p = pos.row3(i);
            let base = cell_of(p, h);
            let mut found = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let key = [
                            base[0].saturating_add(dx),
                            base[1].saturating_add(dy),
                            base[2].saturating_add(dz),
                        ];
                        let Some(members) = cells.get(&key) else { continue };
                        for &j in members {
                            if j as usize == i {
                                continue;
                            }
                            let d = (pos.row3(j as usize) - p).norm();
                            if d <= h {
                                found.push((j, d));
                            }
                        }
                    }
                }
            }
            found.sort_unstable_by_key(|&(j, _)| j);
            found
        };

        let per_particle: Vec<Vec<(u32, f64)>> = if n >= PARALLEL_MIN_PARTICLES {
            (0..n).into_par_iter().map(collect_one).collect()
        } else {
            (0..n).map(collect_one).collect()
        };

        let total: usize = per_particle.iter().map(Vec::len).sum();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut nbrs = Vec::with_capacity(total);
        let mut dists = Vec::with_capacity(total);
        offsets.push(0);
        for list in &per_particle {
            for &(j, d) in list {
                nbrs.push(j);
                dists.push(d);
            }
            offsets.push(nbrs.len());
        }
        Ok(Self { h, positions, offsets, nbrs, dists, cells })
    }

    /// Number of particles in the snapshot.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Query radius (also the cell size).
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Total directed neighbor pairs.
    pub fn pair_count(&self) -> usize {
        self.nbrs.len()
    }

    /// Indices j != i with d_ij <= h, sorted ascending. Panics if `i` is out
    /// of range.
    pub fn neighbors(&self, i: usize) -> &[u32] {
        assert!(i < self.len(), "neighbor query index {i} out of range for {} particles", self.len());
        &self.nbrs[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Distances aligned with [`Self::neighbors`].
    pub fn distances(&self, i: usize) -> &[f64] {
        assert!(i < self.len(), "neighbor query index {i} out of range for {} particles", self.len());
        &self.dists[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Raw CSR slices (offsets, neighbor indices, distances). Plain slices so
    /// callers can move them into worker threads; the grid handle itself
    /// holds an `Rc` and cannot cross threads.
    pub(crate) fn csr(&self) -> (&[usize], &[u32], &[f64]) {
        (&self.offsets, &self.nbrs, &self.dists)
    }

    /// All snapshot indices within `r` of an arbitrary point (r must not
    /// exceed the cell size), sorted ascending, with distances.
    pub fn near_point(&self, p: Vector3<f64>, r: f64) -> Vec<(u32, f64)> {
        assert!(r <= self.h, "near_point radius {r} exceeds cell size {}", self.h);
        let base = cell_of(p, self.h);
        let mut found = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = [
                            base[0].saturating_add(dx),
                            base[1].saturating_add(dy),
                            base[2].saturating_add(dz),
                        ];
                    let Some(members) = self.cells.get(&key) else { continue };
                    for &j in members {
                        let d = (self.positions.row3(j as usize) - p).norm();
                        if d <= r {
                            found.push((j, d));
                        }
                    }
                }
            }
        }
        found.sort_unstable_by_key(|&(j, _)| j);
        found
    }

    /// The position snapshot this grid was built from.
    pub(crate) fn positions_rc(&self) -> &Rc<Value> {
        &self.positions
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_from(points: &[[f64; 3]], h: f64) -> NeighborGrid {
        let vs: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(*p)).collect();
        NeighborGrid::build(Rc::new(Value::from_vectors(&vs)), h).unwrap()
    }

    fn brute_force(points: &[[f64; 3]], h: f64) -> Vec<Vec<u32>> {
        let vs: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(*p)).collect();
        (0..vs.len())
            .map(|i| {
                (0..vs.len())
                    .filter(|&j| j != i && (vs[j] - vs[i]).norm() <= h)
                    .map(|j| j as u32)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn three_particle_line_example() {
        let grid = grid_from(&[[0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [0.2, 0.0, 0.0]], 0.1);
        assert_eq!(grid.neighbors(0), &[1]);
        assert_eq!(grid.neighbors(1), &[0]);
        assert_eq!(grid.neighbors(2), &[] as &[u32]);
        assert_eq!(grid.distances(0), &[0.05]);
    }

    #[test]
    fn boundary_distance_is_inclusive() {
        // Dyadic coordinates make d == h exact in floating point.
        let grid = grid_from(&[[0.0, 0.0, 0.0], [0.125, 0.0, 0.0]], 0.125);
        assert_eq!(grid.neighbors(0), &[1]);
        assert_eq!(grid.neighbors(1), &[0]);
    }

    #[test]
    fn matches_brute_force_on_random_cloud() {
        let mut state = 0x12345u64;
        let mut rnd = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let points: Vec<[f64; 3]> = (0..300).map(|_| [rnd() * 0.4, rnd() * 0.4, rnd() * 0.4]).collect();
        let grid = grid_from(&points, 0.1);
        let expected = brute_force(&points, 0.1);
        for i in 0..points.len() {
            assert_eq!(grid.neighbors(i), expected[i].as_slice(), "particle {i}");
        }
    }

    #[test]
    fn near_point_matches_direct_scan() {
        let points: Vec<[f64; 3]> =
            (0..64).map(|i| [(i % 4) as f64 * 0.03, ((i / 4) % 4) as f64 * 0.03, (i / 16) as f64 * 0.03]).collect();
        let grid = grid_from(&points, 0.05);
        let q = Vector3::new(0.045, 0.05, 0.02);
        let got: Vec<u32> = grid.near_point(q, 0.05).into_iter().map(|(j, _)| j).collect();
        let want: Vec<u32> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| (Vector3::from(**p) - q).norm() <= 0.05)
            .map(|(j, _)| j as u32)
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn out_of_range_query_panics() {
        let grid = grid_from(&[[0.0; 3]], 0.1);
        let _ = grid.neighbors(1);
    }

    #[test]
    fn non_finite_positions_are_rejected() {
        let v = Value::from_vec(1, 3, vec![f64::NAN, 0.0, 0.0]);
        assert!(NeighborGrid::build(Rc::new(v), 0.1).is_err());
        let v = Value::from_vec(1, 3, vec![0.0; 3]);
        assert!(NeighborGrid::build(Rc::new(v), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn equivalence_and_symmetry(seed in 0u64..200) {
            let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
            let mut rnd = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
            };
            let n = 40 + (seed as usize % 60);
            let points: Vec<[f64;3]> = (0..n).map(|_| [rnd()*0.3, rnd()*0.3, rnd()*0.3]).collect();
            let grid = grid_from(&points, 0.1);
            let expected = brute_force(&points, 0.1);
            for i in 0..n {
                prop_assert_eq!(grid.neighbors(i), expected[i].as_slice());
                for &j in grid.neighbors(i) {
                    prop_assert!(grid.neighbors(j as usize).contains(&(i as u32)));
                }
            }
        }
    }
}
