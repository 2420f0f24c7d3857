//! Mask selectivity on planted features.
//!
//! The invariant encoder is frozen to the identity over `d = 8` planted
//! dimensions. Dimensions `0..4` hold a reliable one-hot class pattern;
//! dimensions `4..8` hold the same kind of pattern for a label that agrees
//! with the true class only with probability `spurious_agreement`. The two
//! label classifiers and the mask network are trained with the usual
//! alternating objectives, then the mean superior mask over each block is
//! measured.

use serde::{Deserialize, Serialize};

use crate::adversarial_mask::{draw_gumbel_noise, sample_mask, MaskConfig};
use crate::data::Batch;
use crate::disentangle::Architecture;
use crate::numerics::{LinearLayer, Matrix, Mlp, SeededRng, SgdStep};
use crate::{DfaError, Result};

use super::config::{TrainConfig, Variant};
use super::model::{Dims, Group, ModelState};
use super::step::{apply_update, invariant_objective, mask_objective, StepContext, Weights};

pub const PLANTED_DIMS: usize = 8;
const CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub signal: f64,
    pub noise_std: f64,
    pub spurious_agreement: f64,
    pub mask: MaskConfig,
    pub mask_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            samples: 400,
            epochs: 30,
            batch_size: 16,
            warmup_epochs: 5,
            lr: 0.01,
            signal: 2.0,
            noise_std: 1.0,
            spurious_agreement: 0.7,
            mask: MaskConfig::default(),
            mask_hidden: vec![16],
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub causal_mask_mean: f64,
    pub spurious_mask_mean: f64,
}

impl ProbeResult {
    pub fn selective(&self) -> bool {
        self.causal_mask_mean > self.spurious_mask_mean
    }
}

/// Planted features and labels.
pub fn planted_features(cfg: &ProbeConfig, rng: &mut SeededRng) -> (Matrix, Vec<usize>) {
    let mut x = Matrix::zeros(cfg.samples, PLANTED_DIMS);
    let mut labels = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let y = i % CLASSES;
        let s = if rng.uniform() < cfg.spurious_agreement { y } else { rng.below(CLASSES) };
        let row = x.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = cfg.noise_std * rng.normal();
            if j == y || j == CLASSES + s {
                *v += cfg.signal;
            }
        }
        labels.push(y);
    }
    (x, labels)
}

fn identity_encoder() -> Mlp {
    let layer = LinearLayer::new(Matrix::identity(PLANTED_DIMS), vec![0.0; PLANTED_DIMS]).expect("square");
    Mlp { layers: vec![layer] }
}

pub fn mask_selectivity(cfg: &ProbeConfig) -> Result<ProbeResult> {
    if cfg.samples < cfg.batch_size || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(DfaError::InvalidConfig("probe needs lr > 0 and 0 < batch_size <= samples".into()));
    }
    cfg.mask.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let (x, labels) = planted_features(cfg, &mut rng);
    let train = TrainConfig {
        mask: cfg.mask,
        architecture: Architecture {
            encoder_hidden: Vec::new(),
            feature_dim: PLANTED_DIMS,
            domain_classifier_hidden: vec![2],
            mask_hidden: cfg.mask_hidden.clone(),
        },
        ..TrainConfig::default()
    };
    let dims = Dims {
        input_dim: PLANTED_DIMS,
        num_sources: 2,
        num_classes: CLASSES,
    };
    let mut state = ModelState::init(&train.architecture, dims, &mut rng)?;
    state.invariant = identity_encoder();
    let frozen = state.snapshot(Group::Invariant)[..2].to_vec();
    let sgd = SgdStep {
        lr: cfg.lr,
        momentum: train.momentum,
        weight_decay: train.weight_decay,
    };
    let cls_only = Weights {
        cls: 1.0,
        dc_inv: 0.0,
        cl_dr: 0.0,
        cl_cr: 0.0,
    };
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    for epoch in 0..cfg.epochs {
        let warmup = epoch < cfg.warmup_epochs;
        rng.shuffle(&mut order);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = Batch::from_parts(
                x.select_rows(chunk),
                chunk.iter().map(|&i| labels[i]).collect(),
                vec![0; chunk.len()],
                1,
            )?;
            let noise = draw_gumbel_noise(batch.len(), PLANTED_DIMS, &mut rng);
            let ctx = StepContext::build(&state, &batch, &noise, &cfg.mask, Variant::Model2, warmup)?;
            let (_, grads) = invariant_objective(&state, &batch, &ctx, &train, Variant::Model2, cls_only)?;
            apply_update(&mut state, Group::Invariant, &grads, sgd);
            let mut params = state.snapshot(Group::Invariant);
            params[..2].clone_from_slice(&frozen);
            state.set_group(Group::Invariant, &params)?;
            if !warmup {
                let (_, grads) = mask_objective(&state, &batch, &noise, &cfg.mask)?;
                apply_update(&mut state, Group::Mask, &grads, sgd);
            }
        }
    }
    let noise = draw_gumbel_noise(cfg.samples, PLANTED_DIMS, &mut rng);
    let mask = sample_mask(&state.mask_net, &x, &noise, &cfg.mask, false)?;
    let block_mean = |cols: std::ops::Range<usize>| {
        let width = cols.len() as f64;
        mask.sup.iter_rows().map(|r| r[cols.clone()].iter().sum::<f64>() / width).sum::<f64>() / cfg.samples as f64
    };
    Ok(ProbeResult {
        causal_mask_mean: block_mean(0..CLASSES),
        spurious_mask_mean: block_mean(CLASSES..PLANTED_DIMS),
    })
}
