//! Piecewise-linear finite element matrices.

use windcast_sparse::CscMatrix;

use super::mesh::Mesh;

/// Lumped mass, stiffness and the second-order term `G C⁻¹ G`.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    /// Diagonal of the lumped mass matrix.
    pub mass: Vec<f64>,
    pub stiffness: CscMatrix,
    pub stiffness2: CscMatrix,
}

impl FemMatrices {
    pub fn mass_matrix(&self) -> CscMatrix {
        CscMatrix::from_diagonal(&self.mass)
    }
}

pub fn fem_matrices(mesh: &Mesh) -> FemMatrices {
    let n = mesh.n_vertices();
    let v = mesh.vertices();
    let mut mass = vec![0.0; n];
    let mut trip = Vec::with_capacity(9 * mesh.triangles().len());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.triangle_area(t);
        // edge opposite local vertex k
        let e: [[f64; 2]; 3] = std::array::from_fn(|k| {
            let (a, b) = (v[tri[(k + 1) % 3]], v[tri[(k + 2) % 3]]);
            [b[0] - a[0], b[1] - a[1]]
        });
        for k in 0..3 {
            mass[tri[k]] += area / 3.0;
            for l in 0..3 {
                let g = (e[k][0] * e[l][0] + e[k][1] * e[l][1]) / (4.0 * area);
                trip.push((tri[k], tri[l], g));
            }
        }
    }
    let stiffness = CscMatrix::from_triplets(n, n, &trip).expect("mesh indices in range");
    let inv_mass: Vec<f64> = mass.iter().map(|m| 1.0 / m).collect();
    let scaled = CscMatrix::from_diagonal(&inv_mass)
        .matmul(&stiffness)
        .expect("square");
    let stiffness2 = stiffness.matmul(&scaled).expect("square");
    FemMatrices {
        mass,
        stiffness,
        stiffness2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn right_triangle_by_hand() {
        let m = Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap();
        let f = fem_matrices(&m);
        for &c in &f.mass {
            assert!((c - 1.0 / 6.0).abs() < 1e-15);
        }
        // grad φ0 = (-1,-1), grad φ1 = (1,0), grad φ2 = (0,1), area 1/2
        let expected = [1.0, -0.5, -0.5, -0.5, 0.5, 0.0, -0.5, 0.0, 0.5];
        let g = f.stiffness.to_dense();
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn stiffness_null_space_and_symmetry() {
        let m = Mesh::regular_grid(6, 5, 0.3).unwrap();
        let f = fem_matrices(&m);
        assert!(f.stiffness.row_sums().iter().all(|s| s.abs() < 1e-12));
        assert!(f.stiffness.is_symmetric(1e-14));
        assert!(f.stiffness2.is_symmetric(1e-12));
        assert!(f.stiffness2.row_sums().iter().all(|s| s.abs() < 1e-10));
    }

    #[test]
    fn mass_sums_to_area_under_refinement() {
        let coarse = Mesh::regular_grid(3, 3, 1.0).unwrap();
        let fine = Mesh::regular_grid(5, 5, 0.5).unwrap();
        let a: f64 = fem_matrices(&coarse).mass.iter().sum();
        let b: f64 = fem_matrices(&fine).mass.iter().sum();
        assert!((a - 4.0).abs() < 1e-12);
        assert!((b - 4.0).abs() < 1e-12);
    }
}
