use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial_mask::MaskConfig;
use crate::contrastive::ContrastiveConfig;
use crate::disentangle::Architecture;
use crate::{DfaError, Result};

/// Module combinations compared in the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Disentanglement only; classification on unmasked `f_I`.
    Model1,
    /// Adversarial mask only.
    Model2,
    /// Disentanglement and mask, no augmentation.
    Model3,
    /// Baseline plus the domain-related stream.
    Model4,
    /// Baseline plus the causal-related stream.
    Model5,
    /// Everything enabled.
    Dfa,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Model1,
        Variant::Model2,
        Variant::Model3,
        Variant::Model4,
        Variant::Model5,
        Variant::Dfa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Model1 => "model1",
            Variant::Model2 => "model2",
            Variant::Model3 => "model3",
            Variant::Model4 => "model4",
            Variant::Model5 => "model5",
            Variant::Dfa => "dfa",
        }
    }

    pub fn disentangle(self) -> bool {
        self != Variant::Model2
    }

    pub fn mask(self) -> bool {
        self != Variant::Model1
    }

    pub fn domain_stream(self) -> bool {
        matches!(self, Variant::Model4 | Variant::Dfa)
    }

    pub fn causal_stream(self) -> bool {
        matches!(self, Variant::Model5 | Variant::Dfa)
    }

    pub fn contrastive(self) -> bool {
        self.domain_stream() || self.causal_stream()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = DfaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                DfaError::InvalidConfig(format!(
                    "unknown variant {s:?}, expected one of model1..model5, dfa"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Nominal batch size `B`; `n = max(1, B / k)` unless `per_domain` is set.
    pub batch_size: usize,
    pub per_domain: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to the mask network as well.
    pub mask_weight_decay: bool,
    pub lr_decay_factor: f64,
    /// Fraction of `epochs` after which the decayed rate applies.
    pub lr_decay_at: f64,
    pub lambda_inv: f64,
    pub ramp_up_epochs: usize,
    pub lambda_cl: f64,
    /// Epochs with identity masks, no mask updates and no contrastive term.
    pub warmup_epochs: usize,
    pub contrastive: ContrastiveConfig,
    pub mask: MaskConfig,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            per_domain: None,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            mask_weight_decay: true,
            lr_decay_factor: 0.1,
            lr_decay_at: 0.8,
            lambda_inv: 1.0,
            ramp_up_epochs: 5,
            lambda_cl: 0.001,
            warmup_epochs: 5,
            contrastive: ContrastiveConfig::default(),
            mask: MaskConfig::default(),
            architecture: Architecture::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DfaError::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 || self.per_domain == Some(0) {
            return bad("batch size must be positive".into());
        }
        let positive = [("lr", self.lr), ("lr_decay_factor", self.lr_decay_factor)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_inv", self.lambda_inv),
            ("lambda_cl", self.lambda_cl),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.momentum >= 1.0 {
            return bad(format!("momentum must be below 1, got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) {
            return bad(format!("lr_decay_at must lie in [0, 1], got {}", self.lr_decay_at));
        }
        if self.ramp_up_epochs == 0 {
            return bad("ramp_up_epochs must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warm-up of {} epochs exceeds {} training epochs",
                self.warmup_epochs, self.epochs
            ));
        }
        self.contrastive.validate()?;
        self.mask.validate()?;
        self.architecture.validate()
    }

    /// Samples drawn per source domain in every batch.
    pub fn per_domain_for(&self, num_sources: usize) -> usize {
        self.per_domain
            .unwrap_or_else(|| (self.batch_size / num_sources.max(1)).max(1))
    }

    /// Checks the configuration against a variant.
    pub fn check_variant(&self, variant: Variant) -> Result<()> {
        if variant.contrastive() && self.warmup_epochs >= self.epochs {
            return Err(DfaError::InvalidConfig(format!(
                "variant {variant} trains augmentation streams but the warm-up covers all {} epochs",
                self.epochs
            )));
        }
        Ok(())
    }
}
