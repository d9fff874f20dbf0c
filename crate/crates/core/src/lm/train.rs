use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lm_loss_and_grads, HeadMask, ModelParams};
use crate::error::{Error, Result};
use crate::optim::{mean_loss_and_grads, Adam, AdamConfig};
use crate::tensor::Scalar;

/// Next-token training of the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Seeds the window order.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            optimizer: AdamConfig::with_lr(3e-3),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean loss of every batch, in order.
    pub batch_losses: Vec<f64>,
    /// Mean batch loss over the last epoch.
    pub last_epoch_loss: f64,
}

/// Cuts a token stream into consecutive windows of at most `window` tokens.
/// A trailing piece shorter than two tokens is dropped.
pub fn lm_windows(stream: &[usize], window: usize) -> Vec<Vec<usize>> {
    assert!(window >= 2, "window must hold at least two tokens");
    stream
        .chunks(window)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Trains `params` on `windows`. With a `mask`, gated-off heads take no
/// part in the forward pass and receive no gradient.
pub fn pretrain<F: Scalar>(
    params: &mut ModelParams<F>,
    windows: &[Vec<usize>],
    config: &PretrainConfig,
    mask: Option<&HeadMask>,
) -> Result<PretrainReport> {
    if windows.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config(
            "pretraining needs positive epochs and batch_size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.optimizer, params.tensors());
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut batch_losses = Vec::new();
    let mut last_epoch_loss = 0.0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let snapshot: &ModelParams<F> = params;
            let (loss, grads) = mean_loss_and_grads(batch, |&i| {
                lm_loss_and_grads(snapshot, &windows[i], mask)
            })?;
            adam.step(&mut params.tensors_mut(), &grads);
            epoch.push(loss.as_f64());
        }
        last_epoch_loss = epoch.iter().sum::<f64>() / epoch.len() as f64;
        batch_losses.extend(epoch);
    }
    params.check_finite()?;
    Ok(PretrainReport {
        batch_losses,
        last_epoch_loss,
    })
}
