use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex balancing `N` objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidWeight("empty weight vector".into()));
        }
        if let Some(bad) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::InvalidWeight(format!("entry {bad} is negative or non-finite")));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidWeight(format!("entries sum to {total}, not 1")));
        }
        Ok(Self(w))
    }

    /// The simplex vertex `e_i`.
    pub fn vertex(n: usize, i: usize) -> Self {
        assert!(i < n, "vertex index {i} out of range for {n} objectives");
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Self(w)
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Two-objective weight `(a, 1 - a)`.
    pub fn pair(a: f64) -> Result<Self> {
        Self::new(vec![a, 1.0 - a])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// Index of the single unit entry, if this is a vertex.
    pub fn vertex_index(&self) -> Option<usize> {
        let ones: Vec<usize> = (0..self.0.len()).filter(|&i| self.0[i] == 1.0).collect();
        match ones.as_slice() {
            [i] if self.0.iter().filter(|&&x| x != 0.0).count() == 1 => Some(*i),
            _ => None,
        }
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// The two-objective grid `(1, 0), (0.8, 0.2), ..., (0, 1)` with `steps + 1`
/// points, first objective weight descending.
pub fn pair_grid(steps: usize) -> Vec<WeightVector> {
    (0..=steps)
        .map(|k| {
            let b = k as f64 / steps as f64;
            let a = (steps - k) as f64 / steps as f64;
            WeightVector(vec![a, b])
        })
        .collect()
}
