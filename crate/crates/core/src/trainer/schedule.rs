use super::config::TrainConfig;

/// `exp(-5 (1 - t)^2)` with `t = min(epoch / length, 1)`.
pub fn ramp_up(epoch: usize, length: usize) -> f64 {
    assert!(length > 0, "ramp-up length must be positive");
    let t = (epoch as f64 / length as f64).min(1.0);
    (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// First epoch trained at the decayed learning rate.
pub fn decay_epoch(cfg: &TrainConfig) -> usize {
    (cfg.lr_decay_at * cfg.epochs as f64).floor() as usize
}

/// Epoch-resolved hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub epoch: usize,
    pub lr: f64,
    pub lambda_inv: f64,
    pub lambda_cl: f64,
    /// Masks are the identity and the mask network is frozen.
    pub warmup: bool,
}

impl Schedule {
    pub fn at(cfg: &TrainConfig, epoch: usize) -> Self {
        let warmup = epoch < cfg.warmup_epochs;
        let lr = if epoch >= decay_epoch(cfg) {
            cfg.lr * cfg.lr_decay_factor
        } else {
            cfg.lr
        };
        Schedule {
            epoch,
            lr,
            lambda_inv: cfg.lambda_inv * ramp_up(epoch, cfg.ramp_up_epochs),
            lambda_cl: if warmup { 0.0 } else { cfg.lambda_cl },
            warmup,
        }
    }
}
