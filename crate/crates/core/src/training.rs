//! Minibatch Adam training of the fusion network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::conv::Precision;
use crate::data::PatchSet;
use crate::error::{FusionError, Result};
use crate::graph::Gradients;
use crate::losses::LossBreakdown;
use crate::network::{Ablation, FusionNetwork};
use crate::tensor::Tensor;
use crate::types::{preset_weights, FusedImage, ImagePair, LossWeights, NetworkConfig, TaskKind};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub task: TaskKind,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation: Ablation,
    pub network: NetworkConfig,
    /// Arithmetic of the convolution products during training.
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    /// Defaults for a task: batch 16, lr 1e-5, 10 epochs, preset weights.
    pub fn new(task: TaskKind) -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-5,
            epochs: 10,
            task,
            weights: preset_weights(task),
            seed: 0,
            ablation: Ablation::Full,
            network: NetworkConfig::default(),
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FusionError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(FusionError::InvalidConfig(format!(
                "learning_rate must be finite and >= 0 (got {})",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(FusionError::InvalidConfig("epochs must be >= 1".into()));
        }
        LossWeights::new(
            self.weights.lambda_mi,
            self.weights.lambda_mj,
            self.weights.lambda_si,
            self.weights.lambda_sj,
        )?;
        self.network.validate()
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(net: &FusionNetwork) -> Self {
        Adam {
            m: net.params().zeros_like(),
            v: net.params().zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut FusionNetwork, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let params = net.params_mut();
        for id in 0..params.len() {
            let (m, v, g) = (&mut self.m[id], &mut self.v[id], grads.get(id));
            for (k, p) in params.values_mut(id).iter_mut().enumerate() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

pub fn build_ablation(config: &TrainConfig) -> Result<FusionNetwork> {
    FusionNetwork::new(&config.network, config.ablation, config.seed)
}

/// Mean objective and gradient over a batch of stream pairs. Per-sample
/// gradients are computed in parallel and summed in batch order.
pub fn batch_loss_and_grad(
    net: &FusionNetwork,
    batch: &[&(Tensor, Tensor)],
    weights: &LossWeights,
    precision: Precision,
) -> Result<(LossBreakdown, Gradients)> {
    let results = batch
        .par_iter()
        .map(|(si, sj)| net.loss_and_grad_with(si, sj, weights, precision))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Gradients::zeros(net.params());
    let mut acc = [0.0; 5];
    for (loss, g) in &results {
        grads.accumulate(g);
        for (a, x) in acc.iter_mut().zip([loss.mse_i, loss.mse_j, loss.ssim_i, loss.ssim_j, loss.total]) {
            *a += x;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    let mean = LossBreakdown {
        mse_i: acc[0] * scale,
        mse_j: acc[1] * scale,
        ssim_i: acc[2] * scale,
        ssim_j: acc[3] * scale,
        total: acc[4] * scale,
    };
    Ok((mean, grads))
}

/// Mean total objective over full pairs, without gradients.
pub fn validation_loss(net: &FusionNetwork, pairs: &[ImagePair], weights: &LossWeights) -> Result<f64> {
    if pairs.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    let totals = pairs
        .par_iter()
        .map(|p| {
            let (si, sj) = p.streams();
            net.loss(&si, &sj, weights).map(|l| l.total)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(totals.iter().sum::<f64>() / totals.len() as f64)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Trains from a fresh initialization, recording the mean batch loss of
/// every step.
pub fn train(config: &TrainConfig, patches: &PatchSet) -> Result<Checkpoint> {
    train_with(config, patches, |_, _| {})
}

/// As [`train`], calling `on_step(step, loss)` after each update.
pub fn train_with(
    config: &TrainConfig,
    patches: &PatchSet,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<Checkpoint> {
    config.validate()?;
    if patches.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    let mut net = build_ablation(config)?;
    let mut adam = Adam::new(&net);
    let streams: Vec<(Tensor, Tensor)> = patches.patches.iter().map(ImagePair::streams).collect();
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        let order = epoch_order(streams.len(), config.seed, epoch);
        for chunk in order.chunks(config.batch_size) {
            let step = history.len();
            let batch: Vec<&(Tensor, Tensor)> = chunk.iter().map(|&k| &streams[k]).collect();
            let (loss, grads) = batch_loss_and_grad(&net, &batch, &config.weights, config.precision)?;
            if !loss.is_finite() {
                return Err(FusionError::NonFiniteLoss {
                    step,
                    detail: format!("{loss:?}"),
                });
            }
            if !grads.is_finite() {
                return Err(FusionError::NonFiniteLoss {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            adam.step(&mut net, &grads, config.learning_rate);
            on_step(step, &loss);
            history.push(loss);
        }
    }
    Ok(Checkpoint {
        config: config.clone(),
        network: net,
        optimizer: adam,
        history,
    })
}

/// Full-resolution inference with trained parameters.
pub fn fuse(checkpoint: &Checkpoint, pair: &ImagePair) -> Result<FusedImage> {
    checkpoint.network.fuse(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::expand_patches;
    use crate::types::{validate_pair, Image};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            epochs: 1,
            network: NetworkConfig {
                attn_blocks: 2,
                attn_feat_channels: 4,
                aux_channels: 4,
                merge_channels: 4,
                drdb_growth: 4,
                head_channels: 4,
                ..NetworkConfig::default()
            },
            ..TrainConfig::new(TaskKind::InfraredVisible)
        }
    }

    fn patches(n: usize) -> PatchSet {
        let pairs: Vec<ImagePair> = (0..n)
            .map(|k| {
                let a: Vec<f64> = (0..256).map(|p| 0.5 + 0.4 * ((p + 7 * k) as f64 * 0.13).sin()).collect();
                let b: Vec<f64> = (0..256).map(|p| 0.5 + 0.4 * ((p * 3 + k) as f64 * 0.07).cos()).collect();
                validate_pair(
                    &Image::gray(format!("a{k}"), 16, 16, a).unwrap(),
                    &Image::gray(format!("b{k}"), 16, 16, b).unwrap(),
                    TaskKind::InfraredVisible,
                )
                .unwrap()
            })
            .collect();
        expand_patches(&pairs, 16, 16).unwrap()
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = TrainConfig::new(TaskKind::MriPet);
        assert_eq!(c.precision, Precision::F32);
        assert_eq!((c.batch_size, c.learning_rate, c.epochs), (16, 1e-5, 10));
        assert_eq!(c.weights, preset_weights(TaskKind::MriPet));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            TrainConfig { batch_size: 0, ..tiny_config() },
            TrainConfig { epochs: 0, ..tiny_config() },
            TrainConfig { learning_rate: -1.0, ..tiny_config() },
            TrainConfig { learning_rate: f64::NAN, ..tiny_config() },
        ] {
            assert!(matches!(bad.validate(), Err(FusionError::InvalidConfig(_))));
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let empty = PatchSet {
            patches: vec![],
            patch: 16,
            stride: 16,
            source_ids: vec![],
        };
        assert!(matches!(train(&tiny_config(), &empty), Err(FusionError::EmptyDataset)));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let cfg = TrainConfig { learning_rate: 0.0, ..tiny_config() };
        let ckpt = train(&cfg, &patches(3)).unwrap();
        assert_eq!(ckpt.history.len(), 2);
        assert_eq!(ckpt.network.params(), build_ablation(&cfg).unwrap().params());
    }

    #[test]
    fn one_step_moves_every_subnetwork() {
        let cfg = tiny_config();
        let before = build_ablation(&cfg).unwrap();
        let ckpt = train(&cfg, &patches(2)).unwrap();
        for prefix in ["attn.", "aux.", "merge."] {
            let moved = before
                .params()
                .iter()
                .zip(ckpt.network.params().iter())
                .filter(|(p, _)| p.name.starts_with(prefix))
                .any(|(p, q)| p.values != q.values);
            assert!(moved, "{prefix} did not change");
        }
    }

    #[test]
    fn same_seed_gives_identical_history() {
        let cfg = TrainConfig { epochs: 2, ..tiny_config() };
        let set = patches(3);
        let a = train(&cfg, &set).unwrap();
        let b = train(&cfg, &set).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.network, b.network);
    }

    #[test]
    fn shuffle_is_a_permutation_and_varies_by_epoch() {
        let o0 = epoch_order(20, 5, 0);
        let o1 = epoch_order(20, 5, 1);
        let mut sorted = o0.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(o0, o1);
        assert_eq!(o0, epoch_order(20, 5, 0));
    }

    #[test]
    fn adam_first_step_moves_by_the_learning_rate() {
        let mut net = build_ablation(&tiny_config()).unwrap();
        let before = net.params().clone();
        // Bias correction makes the first step lr * g / (|g| + eps) per scalar.
        let g: Vec<Vec<f64>> = before
            .iter()
            .enumerate()
            .map(|(id, p)| p.values.iter().map(|_| if id % 2 == 0 { 0.5 } else { -2.0 }).collect())
            .collect();
        let mut adam = Adam::new(&net);
        adam.step(&mut net, &Gradients::from_vecs(g.clone()), 0.1);
        for (id, (p, q)) in before.iter().zip(net.params().iter()).enumerate() {
            let gk = g[id][0];
            let expected = 0.1 * gk / (gk.abs() + ADAM_EPS);
            for (a, b) in p.values.iter().zip(&q.values) {
                assert!(((a - b) - expected).abs() < 1e-12);
            }
        }
        assert_eq!(adam.t, 1);
    }
}
