use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Soft,
    Hard,
}

/// Per-(layer, head) multiplicative gates on attention head outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMask {
    n_layers: usize,
    n_heads: usize,
    values: Vec<f64>,
    mode: MaskMode,
}

impl HeadMask {
    pub fn ones(n_layers: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            values: vec![1.0; n_layers * n_heads],
            mode: MaskMode::Hard,
        }
    }

    pub fn zeros(n_layers: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            values: vec![0.0; n_layers * n_heads],
            mode: MaskMode::Hard,
        }
    }

    /// Soft gates in `[0, 1]`, row-major `L × H`.
    pub fn soft(n_layers: usize, n_heads: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_layers * n_heads {
            return Err(Error::Shape(format!(
                "mask needs {} values, got {}",
                n_layers * n_heads,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invariant(format!("gate value {v} outside [0, 1]")));
        }
        Ok(Self {
            n_layers,
            n_heads,
            values,
            mode: MaskMode::Soft,
        })
    }

    /// Hard mask keeping exactly the listed `(layer, head)` pairs.
    pub fn keep(n_layers: usize, n_heads: usize, heads: &[(usize, usize)]) -> Result<Self> {
        let mut mask = Self::zeros(n_layers, n_heads);
        for &(l, h) in heads {
            if l >= n_layers || h >= n_heads {
                return Err(Error::Shape(format!(
                    "head ({l}, {h}) outside {n_layers}x{n_heads} grid"
                )));
            }
            mask.values[l * n_heads + h] = 1.0;
        }
        Ok(mask)
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.n_heads + head]
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    /// Kept `(layer, head)` pairs of a hard mask, in lexicographic order.
    pub fn kept(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers)
            .flat_map(|l| (0..self.n_heads).map(move |h| (l, h)))
            .filter(|&(l, h)| self.get(l, h) == 1.0)
            .collect()
    }

    /// Element-wise `1 - gate`.
    pub fn complement(&self) -> Self {
        Self {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            values: self.values.iter().map(|v| 1.0 - v).collect(),
            mode: self.mode,
        }
    }

    pub fn check_shape(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        if self.n_layers != n_layers || self.n_heads != n_heads {
            return Err(Error::Shape(format!(
                "mask is {}x{}, model has {n_layers}x{n_heads} heads",
                self.n_layers, self.n_heads
            )));
        }
        Ok(())
    }

    /// Hard masks must be binary with exactly `k` ones.
    pub fn check_hard(&self, k: usize) -> Result<()> {
        if self.mode != MaskMode::Hard {
            return Err(Error::Invariant("expected a hard mask".into()));
        }
        if self.values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invariant("hard mask has non-binary entries".into()));
        }
        let ones = self.count_ones();
        if ones != k {
            return Err(Error::Invariant(format!(
                "hard mask keeps {ones} heads, expected {k}"
            )));
        }
        Ok(())
    }
}
