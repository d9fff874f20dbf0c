//! Adam.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

pub struct Adam<F> {
    config: AdamConfig,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
    steps: i32,
}

impl<F: Scalar> Adam<F> {
    /// One moment buffer per parameter, shaped like `params`.
    pub fn new<'t>(config: AdamConfig, params: impl IntoIterator<Item = &'t Tensor<F>>) -> Self {
        let first: Vec<Tensor<F>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        let second = first.clone();
        Self {
            config,
            first,
            second,
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update. A zero gradient that has always been zero leaves
    /// the parameter bit-for-bit unchanged.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Tensor<F>]) {
        assert_eq!(params.len(), self.first.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.steps += 1;
        let c = &self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bias1 = F::one() - F::of(c.beta1.powi(self.steps));
        let bias2 = F::one() - F::of(c.beta2.powi(self.steps));
        let lr = F::of(c.lr);
        let eps = F::of(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (F::one() - b1) * gj;
                v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Mean loss and mean gradients of `f` over `items`.
///
/// Items are evaluated in parallel but summed in item order, so the result
/// does not depend on the thread count.
pub fn mean_loss_and_grads<T, F, G>(items: &[T], f: G) -> Result<(F, Vec<Tensor<F>>)>
where
    T: Sync,
    F: Scalar,
    G: Fn(&T) -> Result<(F, Vec<Tensor<F>>)> + Sync,
{
    if items.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let parts: Vec<(F, Vec<Tensor<F>>)> = items.par_iter().map(&f).collect::<Result<_>>()?;
    let mut it = parts.into_iter();
    let (mut loss, mut grads) = it.next().expect("non-empty");
    for (l, g) in it {
        loss += l;
        for (acc, x) in grads.iter_mut().zip(&g) {
            acc.add_assign(x);
        }
    }
    let inv = F::one() / F::of(items.len() as f64);
    for g in &mut grads {
        g.scale_assign(inv);
    }
    Ok((loss * inv, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = Tensor::<f64>::row_vector(vec![3.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), [&x]);
        for _ in 0..500 {
            let g = x.map(|v| 2.0 * v);
            adam.step(&mut [&mut x], &[g]);
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut x = Tensor::<f32>::row_vector(vec![0.25, -1.5]);
        let before = x.clone();
        let mut adam = Adam::new(AdamConfig::default(), [&x]);
        for _ in 0..10 {
            adam.step(&mut [&mut x], &[Tensor::zeros(1, 2)]);
        }
        assert_eq!(x, before);
    }
}
