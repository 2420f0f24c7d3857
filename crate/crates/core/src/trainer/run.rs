use crate::data::{Batch, EpochSampler, Split};
use crate::numerics::SeededRng;
use crate::{DfaError, Result};

use super::config::{TrainConfig, Variant};
use super::eval::{evaluate, evaluate_many};
use super::metrics::EpochMetrics;
use super::model::{Dims, ModelState};
use super::schedule::Schedule;
use super::step::{train_step, StepOutcome};

const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Called after every step with `(epoch, step within epoch, batch, outcome)`.
/// Supplying an observer turns on per-step audits.
pub type Observer<'a> = dyn FnMut(usize, usize, &Batch, &StepOutcome) -> Result<()> + 'a;

pub fn dims_for(split: &Split) -> Result<Dims> {
    let num_classes = split
        .sources
        .iter()
        .chain(std::iter::once(&split.target))
        .flat_map(|d| d.samples.iter().map(|s| s.y + 1))
        .max()
        .unwrap_or(0);
    Ok(Dims {
        input_dim: split.input_dim(),
        num_sources: split.num_sources(),
        num_classes: num_classes.max(2),
    })
}

/// Fresh model for `split`, initialised from the configured seed.
pub fn init_model(cfg: &TrainConfig, split: &Split) -> Result<ModelState> {
    let mut rng = SeededRng::with_stream(cfg.seed, INIT_STREAM);
    ModelState::init(&cfg.architecture, dims_for(split)?, &mut rng)
}

pub fn run_training(cfg: &TrainConfig, split: &Split, variant: Variant) -> Result<(ModelState, Vec<EpochMetrics>)> {
    run_training_with(cfg, split, variant, None)
}

pub fn run_training_with(
    cfg: &TrainConfig,
    split: &Split,
    variant: Variant,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<(ModelState, Vec<EpochMetrics>)> {
    cfg.validate()?;
    cfg.check_variant(variant)?;
    let mut state = init_model(cfg, split)?;
    let n = cfg.per_domain_for(split.num_sources());
    let mut sampler = EpochSampler::new(split, n, SeededRng::with_stream(cfg.seed, BATCH_STREAM))?;
    if sampler.batches_per_epoch() == 0 {
        return Err(DfaError::InvalidConfig(format!(
            "{n} samples per domain requested but a source domain is smaller"
        )));
    }
    let mut noise_rng = SeededRng::with_stream(cfg.seed, NOISE_STREAM);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let sched = Schedule::at(cfg, epoch);
        let batches = sampler.epoch()?;
        let mut sums = [0.0; 7];
        let mut mask_mean = 0.0;
        let mut mask_updates = 0;
        for (i, batch) in batches.iter().enumerate() {
            let out = train_step(&mut state, batch, &mut noise_rng, cfg, variant, &sched, observer.is_some())?;
            let l = &out.losses;
            for (s, v) in sums.iter_mut().zip([l.dc_spe, l.dc_inv, l.cls_sup, l.cls_inf, l.mask, l.cl_dr, l.cl_cr]) {
                *s += v;
            }
            mask_mean += out.mask_sup_mean;
            mask_updates += usize::from(out.mask_updated);
            if let Some(obs) = observer.as_deref_mut() {
                obs(epoch, i, batch, &out)?;
            }
        }
        state.epoch = epoch + 1;
        let count = batches.len() as f64;
        let [dc_spe, dc_inv, cls_sup, cls_inf, mask, cl_dr, cl_cr] = sums.map(|s| s / count);
        log.push(EpochMetrics {
            epoch,
            lr: sched.lr,
            dc_spe,
            dc_inv,
            cls_sup,
            cls_inf,
            mask,
            cl_dr,
            cl_cr,
            lambda_inv: sched.lambda_inv,
            lambda_cl: sched.lambda_cl,
            train_acc: evaluate_many(&state, &split.sources)?.accuracy,
            target_acc: evaluate(&state, &split.target)?.accuracy,
            mask_sup_mean: mask_mean / count,
            mask_updates,
        });
    }
    Ok((state, log))
}
