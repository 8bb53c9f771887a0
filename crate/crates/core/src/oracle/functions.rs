//! Analytic objectives that consume the search vector directly. They certify
//! the optimizer without any prompt machinery in the loop.

use std::f64::consts::PI;

use super::{LossReport, Oracle, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    Sphere { dim: usize },
    Rosenbrock { dim: usize },
    Rastrigin { dim: usize },
}

impl TestFunction {
    pub fn dim(&self) -> usize {
        match *self {
            TestFunction::Sphere { dim } | TestFunction::Rosenbrock { dim } | TestFunction::Rastrigin { dim } => dim,
        }
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        match self {
            TestFunction::Sphere { .. } => z.iter().map(|v| v * v).sum(),
            TestFunction::Rosenbrock { .. } => {
                z.windows(2).map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2)).sum()
            }
            TestFunction::Rastrigin { .. } => {
                10.0 * z.len() as f64 + z.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()).sum::<f64>()
            }
        }
    }
}

impl Oracle for TestFunction {
    fn prompt_dim(&self) -> usize {
        self.dim()
    }

    fn num_classes(&self) -> usize {
        1
    }

    /// Ignores the batch; `loss` is the function value and `accuracy` is 0.
    fn evaluate(&self, prompt: &[f64], _batch: &[Sample]) -> Result<LossReport> {
        if prompt.len() != self.dim() {
            return Err(Error::invalid(format!("point has length {}, expected {}", prompt.len(), self.dim())));
        }
        Ok(LossReport { loss: self.value(prompt), accuracy: 0.0, per_sample_loss: None, num_classes: 1 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_minima() {
        assert_eq!(TestFunction::Sphere { dim: 3 }.value(&[0.0; 3]), 0.0);
        assert_eq!(TestFunction::Rosenbrock { dim: 4 }.value(&[1.0; 4]), 0.0);
        assert!(TestFunction::Rastrigin { dim: 5 }.value(&[0.0; 5]).abs() < 1e-12);
        assert_eq!(TestFunction::Sphere { dim: 2 }.value(&[3.0, 4.0]), 25.0);
        assert_eq!(TestFunction::Rosenbrock { dim: 2 }.value(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn oracle_surface() {
        let f = TestFunction::Rastrigin { dim: 2 };
        let r = f.evaluate(&[1.0, 0.0], &[]).unwrap();
        assert!((r.loss - 1.0).abs() < 1e-12);
        assert!(f.evaluate(&[1.0], &[]).is_err());
    }
}
