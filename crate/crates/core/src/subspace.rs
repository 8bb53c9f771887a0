//! Seeded random projection from the search subspace to the prompt space.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Everything needed to regenerate the projection matrix. This is what the
/// server broadcasts instead of the matrix itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    #[serde(rename = "D")]
    pub full_dim: usize,
    #[serde(rename = "d")]
    pub sub_dim: usize,
    pub seed: u64,
    pub gamma: f64,
}

/// A frozen `D x d` matrix.
#[derive(Debug, Clone)]
pub struct Projection {
    spec: Option<ProjectionSpec>,
    matrix: DMatrix<f64>,
}

/// Entries are i.i.d. `N(0, gamma^2)`, drawn row-major from a ChaCha8 stream
/// seeded with `spec.seed`.
pub fn generate_projection(spec: &ProjectionSpec) -> Result<Projection> {
    if spec.full_dim == 0 || spec.sub_dim == 0 {
        return Err(Error::invalid("projection dimensions must be positive"));
    }
    if spec.sub_dim > spec.full_dim {
        return Err(Error::invalid(format!(
            "subspace dimension {} exceeds prompt dimension {}",
            spec.sub_dim, spec.full_dim
        )));
    }
    if !spec.gamma.is_finite() || spec.gamma < 0.0 {
        return Err(Error::invalid(format!("projection scale must be non-negative, got {}", spec.gamma)));
    }
    if spec.gamma == 0.0 {
        log::warn!("projection scale is zero; every prompt will be the zero vector");
    }
    let mut rng = seed::stream(spec.seed);
    let entries: Vec<f64> =
        (0..spec.full_dim * spec.sub_dim).map(|_| spec.gamma * rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Projection { spec: Some(*spec), matrix: DMatrix::from_row_slice(spec.full_dim, spec.sub_dim, &entries) })
}

impl Projection {
    /// Wraps an explicit matrix (no regeneration spec).
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        Self { spec: None, matrix }
    }

    pub fn spec(&self) -> Option<&ProjectionSpec> {
        self.spec.as_ref()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn full_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn sub_dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// `p = A z`.
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.sub_dim() {
            return Err(Error::invalid(format!("subspace vector has length {}, expected {}", z.len(), self.sub_dim())));
        }
        let p = &self.matrix * DVector::from_column_slice(z);
        Ok(p.as_slice().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(full_dim: usize, sub_dim: usize, seed: u64, gamma: f64) -> ProjectionSpec {
        ProjectionSpec { full_dim, sub_dim, seed, gamma }
    }

    #[test]
    fn regeneration_is_bitwise_identical() {
        let s = spec(40, 7, 99, 1.0);
        let a = generate_projection(&s).unwrap();
        let b = generate_projection(&s).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        assert_ne!(a.matrix(), generate_projection(&spec(40, 7, 100, 1.0)).unwrap().matrix());
    }

    #[test]
    fn zero_scale_gives_zero_matrix() {
        let a = generate_projection(&spec(10, 3, 1, 0.0)).unwrap();
        assert!(a.matrix().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn entry_variance_matches_scale() {
        let a = generate_projection(&spec(100, 10, 2024, 1.0)).unwrap();
        let n = a.matrix().len() as f64;
        let mean = a.matrix().iter().sum::<f64>() / n;
        let var = a.matrix().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((0.85..=1.15).contains(&var), "{var}");
    }

    #[test]
    fn rejects_sub_dim_above_full_dim() {
        assert!(matches!(generate_projection(&spec(5, 6, 0, 1.0)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn project_edge_cases() {
        let a = generate_projection(&spec(30, 4, 3, 1.0)).unwrap();
        assert!(a.project(&[0.0; 4]).unwrap().iter().all(|v| *v == 0.0));
        assert!(matches!(a.project(&[0.0; 5]), Err(Error::InvalidArgument(_))));
        let z = [0.3, -1.2, 2.0, 0.01];
        let z2: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        for (x, y) in a.project(&z2).unwrap().iter().zip(a.project(&z).unwrap()) {
            assert!((x - 2.0 * y).abs() <= 1e-12);
        }
        let id = Projection::from_matrix(DMatrix::identity(4, 4));
        assert_eq!(id.project(&z).unwrap(), z.to_vec());
    }

    #[test]
    fn spec_serializes_with_wire_names() {
        let json = serde_json::to_string(&spec(100, 10, 5, 1.0)).unwrap();
        assert_eq!(json, r#"{"D":100,"d":10,"seed":5,"gamma":1.0}"#);
    }

    proptest! {
        #[test]
        fn linear(seed in any::<u64>(), a in -5.0f64..5.0, b in -5.0f64..5.0,
                  z1 in prop::collection::vec(-3.0f64..3.0, 6), z2 in prop::collection::vec(-3.0f64..3.0, 6)) {
            let proj = generate_projection(&spec(25, 6, seed, 1.0)).unwrap();
            let mix: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| a * x + b * y).collect();
            let lhs = proj.project(&mix).unwrap();
            let (p1, p2) = (proj.project(&z1).unwrap(), proj.project(&z2).unwrap());
            for i in 0..25 {
                prop_assert!((lhs[i] - (a * p1[i] + b * p2[i])).abs() <= 1e-10);
            }
        }
    }
}
