//! Observation projectors from space-time weights to (farm, time) cells.

use serde::{Deserialize, Serialize};
use windcast_sparse::CscMatrix;

use super::mesh::Mesh;
use crate::error::{Error, Result};

/// Weights below this are dropped and the row renormalized.
const WEIGHT_FLOOR: f64 = 1e-12;

/// Equally spaced knots at steps 0, s, 2s, … covering a span of steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnotGrid {
    pub spacing: usize,
    pub n_knots: usize,
}

impl KnotGrid {
    /// Fewest knots whose span reaches step `n_steps − 1`.
    pub fn covering(n_steps: usize, spacing: usize) -> Result<Self> {
        if spacing == 0 || n_steps == 0 {
            return Err(Error::Argument(
                "knot spacing and step count must be positive".into(),
            ));
        }
        let n_knots = (n_steps - 1).div_ceil(spacing) + 1;
        Ok(Self {
            spacing,
            n_knots: n_knots.max(2),
        })
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_knots)
            .map(|k| (k * self.spacing) as f64)
            .collect()
    }
}

/// Sparse map from stacked field weights (knot-major) to observation rows
/// (farm-major: row = farm · n_times + time).
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    matrix: CscMatrix,
    n_farms: usize,
    n_times: usize,
}

impl Projector {
    pub fn matrix(&self) -> &CscMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CscMatrix {
        self.matrix
    }

    pub fn n_farms(&self) -> usize {
        self.n_farms
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }
}

/// Barycentric weights per location, zero weights removed.
pub fn spatial_weights(mesh: &Mesh, locations: &[[f64; 2]]) -> Result<Vec<Vec<(usize, f64)>>> {
    locations
        .iter()
        .map(|&p| {
            let (t, w) = mesh.locate(p).ok_or(Error::Coverage { x: p[0], y: p[1] })?;
            Ok(normalize(
                mesh.triangles()[t].iter().copied().zip(w).collect(),
            ))
        })
        .collect()
}

/// Linear interpolation weights between the bracketing knots.
pub fn temporal_weights(knot_times: &[f64], t: f64) -> Result<Vec<(usize, f64)>> {
    let (first, last) = (knot_times[0], *knot_times.last().unwrap());
    if !(t >= first && t <= last) {
        return Err(Error::Extrapolation {
            time: t,
            first,
            last,
        });
    }
    let k = knot_times
        .partition_point(|&x| x <= t)
        .clamp(1, knot_times.len() - 1)
        - 1;
    let lambda = (t - knot_times[k]) / (knot_times[k + 1] - knot_times[k]);
    Ok(normalize(vec![(k, 1.0 - lambda), (k + 1, lambda)]))
}

fn normalize(mut w: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    w.retain(|&(_, x)| x > WEIGHT_FLOOR);
    let s: f64 = w.iter().map(|&(_, x)| x).sum();
    w.iter_mut().for_each(|(_, x)| *x /= s);
    w
}

pub fn build_projector(
    mesh: &Mesh,
    locations: &[[f64; 2]],
    knot_times: &[f64],
    obs_times: &[f64],
) -> Result<Projector> {
    if knot_times.len() < 2 || knot_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument(
            "knot times must be strictly increasing with at least two knots".into(),
        ));
    }
    let k = mesh.n_vertices();
    let space = spatial_weights(mesh, locations)?;
    let time = obs_times
        .iter()
        .map(|&t| temporal_weights(knot_times, t))
        .collect::<Result<Vec<_>>>()?;
    let mut trip = Vec::with_capacity(6 * locations.len() * obs_times.len());
    for (j, sw) in space.iter().enumerate() {
        for (t, tw) in time.iter().enumerate() {
            let row = j * obs_times.len() + t;
            for &(knot, a) in tw {
                for &(v, b) in sw {
                    trip.push((row, knot * k + v, a * b));
                }
            }
        }
    }
    let matrix = CscMatrix::from_triplets(
        locations.len() * obs_times.len(),
        k * knot_times.len(),
        &trip,
    )?;
    Ok(Projector {
        matrix,
        n_farms: locations.len(),
        n_times: obs_times.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0]],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap()
    }

    #[test]
    fn knot_counts() {
        assert_eq!(KnotGrid::covering(192, 12).unwrap().n_knots, 17);
        assert_eq!(KnotGrid::covering(212, 12).unwrap().n_knots, 19);
        assert_eq!(KnotGrid::covering(13, 12).unwrap().n_knots, 2);
        assert_eq!(KnotGrid::covering(14, 12).unwrap().n_knots, 3);
    }

    #[test]
    fn vertex_at_knot_is_single_weight() {
        let p = build_projector(&tri(), &[[3.0, 3.0]], &[0.0, 12.0], &[12.0]).unwrap();
        let m = p.matrix();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 4 + 3), 1.0);
    }

    #[test]
    fn centroid_gets_thirds() {
        let p = build_projector(&tri(), &[[1.0, 1.0]], &[0.0, 12.0], &[0.0]).unwrap();
        let m = p.matrix();
        assert_eq!(m.nnz(), 3);
        for v in 0..3 {
            assert!((m.get(0, v) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoint_between_knots() {
        let p = build_projector(&tri(), &[[0.0, 0.0]], &[0.0, 12.0, 24.0], &[18.0]).unwrap();
        let m = p.matrix();
        assert_eq!(m.get(0, 4), 0.5);
        assert_eq!(m.get(0, 8), 0.5);
    }

    #[test]
    fn rows_sum_to_one_with_at_most_six_entries() {
        let locs = [[0.5, 0.7], [2.2, 1.9], [1.5, 1.5], [3.0, 0.0]];
        let obs: Vec<f64> = (0..25).map(|t| t as f64).collect();
        let p = build_projector(&tri(), &locs, &[0.0, 12.0, 24.0], &obs).unwrap();
        let t = p.matrix().transpose();
        for r in 0..p.matrix().nrows() {
            let (_, v) = t.col(r);
            assert!(v.len() <= 6);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coverage_and_extrapolation_errors() {
        assert!(matches!(
            build_projector(&tri(), &[[4.0, 1.0]], &[0.0, 1.0], &[0.0]),
            Err(Error::Coverage { .. })
        ));
        assert!(matches!(
            build_projector(&tri(), &[[1.0, 1.0]], &[0.0, 1.0], &[1.5]),
            Err(Error::Extrapolation { .. })
        ));
    }
}
