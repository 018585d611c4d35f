use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::network::{Gradients, Network};
use super::{build_input, softmax, Architecture, FusionMode};
use crate::dataset::{augment_flip, balance_classes, sub_seed, FlipBits};
use crate::error::{invalid, Result};
use crate::metrics::{compute_metrics, ConfusionMatrix};
use crate::tiling::{ClassLabel, PatchRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs without a strict validation mRecall improvement before
    /// stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Divisor applied to mean DfB values before they enter the network.
    pub dfb_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, patience: 5, max_epochs: 30, batch_size: 16, seed: 0, dfb_norm: 140.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.dfb_norm > 0.0) || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(invalid("learning rate, dfb_norm, max_epochs and batch_size must be positive"));
        }
        Ok(())
    }
}

/// Network weights together with the optimiser state and the DfB
/// normaliser used at training time.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub net: Network,
    pub adam: AdamState,
    pub dfb_norm: f64,
}

impl NetworkState {
    pub fn new(arch: Architecture, mode: FusionMode, seed: u64, dfb_norm: f64) -> Result<Self> {
        let net = Network::new(arch, mode, seed)?;
        let adam = AdamState::new(&net);
        Ok(Self { net, adam, dfb_norm })
    }

    pub fn mode(&self) -> FusionMode {
        self.net.mode()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mrecall: f64,
    pub best_flag: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the best validation mRecall.
    pub best: NetworkState,
    pub best_epoch: usize,
    pub best_val_mrecall: f64,
    pub log: Vec<EpochLog>,
}

/// Trains `state` on `train_set`, selecting by validation mRecall.
///
/// Every epoch rebalances the training set to the median class count,
/// flips each presentation at random and runs minibatch Adam. Training
/// stops once `patience` epochs in a row fail to strictly improve the best
/// validation mRecall (after the first such epoch when `patience` is 0), or
/// after `max_epochs`.
pub fn train(
    mut state: NetworkState,
    train_set: &[PatchRecord],
    val_set: &[PatchRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid("training and validation sets must be non-empty"));
    }
    state.dfb_norm = cfg.dfb_norm;
    let mode = state.mode();
    let adam_cfg = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
    let indices: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = Gradients::zeros_like(&state.net);

    let mut log = Vec::new();
    let mut best: Option<(NetworkState, usize, f64)> = None;
    let mut stale = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let order = balance_classes(&indices, |&i| train_set[i].label, sub_seed(cfg.seed, 2 * epoch as u64))?;
        let mut flips = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 2 * epoch as u64 + 1));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in batch {
                let p = &train_set[i];
                let tile = augment_flip(&p.image, FlipBits::draw(&mut flips));
                let input = build_input(mode, &tile, p.dfb_mean, state.dfb_norm)?;
                loss_sum += state.net.accumulate_gradients(&input, p.label.index(), &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            state.adam.step(&mut state.net, &grads, &adam_cfg)?;
        }

        let val_mrecall = compute_metrics(&evaluate(&state, val_set)?)?.m_recall;
        let improved = best.as_ref().is_none_or(|b| val_mrecall > b.2);
        log.push(EpochLog { epoch, train_loss: loss_sum / order.len() as f64, val_mrecall, best_flag: improved });
        if improved {
            best = Some((state.clone(), epoch, val_mrecall));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break;
            }
        }
    }
    let (best, best_epoch, best_val_mrecall) = best.expect("at least one epoch runs");
    Ok(TrainOutcome { best, best_epoch, best_val_mrecall, log })
}

/// Per-patch predicted class and class probabilities.
pub fn predict(state: &NetworkState, patches: &[PatchRecord]) -> Result<Vec<(ClassLabel, Vec<f64>)>> {
    patches
        .iter()
        .map(|p| {
            let input = build_input(state.mode(), &p.image, p.dfb_mean, state.dfb_norm)?;
            let probs = softmax(&state.net.logits(&input)?);
            Ok((argmax_class(&probs), probs))
        })
        .collect()
}

pub(crate) fn argmax_class(probs: &[f64]) -> ClassLabel {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    ClassLabel::from_index(best).expect("three-class output")
}

pub fn evaluate(state: &NetworkState, patches: &[PatchRecord]) -> Result<ConfusionMatrix> {
    let preds = predict(state, patches)?;
    Ok(ConfusionMatrix::from_labels(patches.iter().zip(preds).map(|(p, (l, _))| (p.label, l))))
}

/// Builds a DfB-aware network from a trained baseline. Shared weights are
/// copied; the new DfB input channel or DfB feature column starts at zero,
/// so the initial outputs equal the baseline's exactly. The optimiser
/// restarts from zero moments.
pub fn transfer_init(target: FusionMode, baseline: &NetworkState) -> Result<NetworkState> {
    if baseline.mode() != FusionMode::Baseline {
        return Err(invalid(format!("transfer source must be a baseline network, got {}", baseline.mode())));
    }
    if target == FusionMode::Baseline {
        return Err(invalid("transfer target must use the DfB prior"));
    }
    let src = &baseline.net;
    let arch = src.arch().clone();
    let mut net = Network::zeros(arch.clone(), target)?;
    let params: Vec<Vec<f64>> = src.params().to_vec();
    for (i, p) in params.into_iter().enumerate() {
        if net.params()[i].len() == p.len() {
            net.params_mut()[i] = p;
        }
    }
    match target {
        FusionMode::DfbChannel => {
            // [out][3][k][k] -> [out][4][k][k] with a zero fourth channel
            let k2 = arch.conv[0].kernel * arch.conv[0].kernel;
            let old = &src.params()[0];
            let new = &mut net.params_mut()[0];
            for oc in 0..arch.conv[0].out_channels {
                new[oc * 4 * k2..oc * 4 * k2 + 3 * k2].copy_from_slice(&old[oc * 3 * k2..(oc + 1) * 3 * k2]);
            }
        }
        FusionMode::DfbFeature => {
            // [out][D] -> [out][D + 1] with a zero last column
            let wi = net.fc_weight_index(0);
            let d = arch.feature_dim();
            let old = &src.params()[wi];
            let new = &mut net.params_mut()[wi];
            for o in 0..old.len() / d {
                new[o * (d + 1)..o * (d + 1) + d].copy_from_slice(&old[o * d..(o + 1) * d]);
            }
        }
        FusionMode::Baseline => unreachable!(),
    }
    let adam = AdamState::new(&net);
    Ok(NetworkState { net, adam, dfb_norm: baseline.dfb_norm })
}
