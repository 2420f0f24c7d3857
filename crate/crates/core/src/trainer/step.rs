//! One optimisation step: three sequential sub-updates on the same batch.
//!
//! 1. Specific group: domain cross-entropy of `C_d(F_S[d](x))`.
//! 2. Invariant group: `L_cls + λ_inv L_dc_inv + λ_cl (L_cl_DR + L_cl_CR)`
//!    with masks, augmentation partners and partner features computed once
//!    up front and held constant ([`StepContext`]).
//! 3. Mask group: `L_sup - L_inf` with the step's Gumbel noise, skipped
//!    during warm-up.
//!
//! Every sub-update runs a fresh forward pass with the parameters left by the
//! previous one.

use crate::adversarial_mask::{
    apply_masks, draw_gumbel_noise, loss_cls, loss_mask, mask_sup_tape, sample_mask, MaskConfig,
    MaskPair,
};
use crate::augmentation::{
    project_pairs_tape, row_entropies, select_causal_partners, select_domain_partners,
    AugmentedBatch,
};
use crate::contrastive::supcon_tape;
use crate::data::Batch;
use crate::disentangle::{encode_invariant, encode_specific, encode_specific_tape, loss_dc_inv, loss_dc_spe};
use crate::numerics::{softmax_rows, BoundLinear, BoundMlp, Matrix, SeededRng, SgdStep, Tape, Var};
use crate::{DfaError, Result};

use super::config::{TrainConfig, Variant};
use super::model::{Group, ModelState};
use super::schedule::Schedule;

/// Detached quantities shared by the invariant-group objective.
#[derive(Clone, Debug, PartialEq)]
pub struct StepContext {
    pub mask: MaskPair,
    pub dr_partners: Option<Vec<usize>>,
    /// `f_S` rows of the domain-related partners.
    pub dr_features: Option<Matrix>,
    pub cr_partners: Option<Vec<Option<usize>>>,
    /// Anchors that found a causal-related partner.
    pub cr_anchors: Vec<usize>,
    /// `f_inf` rows of the causal-related partners, aligned with `cr_anchors`.
    pub cr_features: Option<Matrix>,
}

impl StepContext {
    pub fn build(
        state: &ModelState,
        batch: &Batch,
        noise: &Matrix,
        mask_cfg: &MaskConfig,
        variant: Variant,
        warmup: bool,
    ) -> Result<Self> {
        let f_i = encode_invariant(&state.invariant, &batch.x)?;
        let mask = if variant.mask() {
            sample_mask(&state.mask_net, &f_i, noise, mask_cfg, warmup)?
        } else {
            MaskPair::identity(f_i.rows(), f_i.cols())
        };
        let (f_sup, f_inf) = apply_masks(&f_i, &mask)?;
        let mut ctx = StepContext {
            mask,
            dr_partners: None,
            dr_features: None,
            cr_partners: None,
            cr_anchors: Vec::new(),
            cr_features: None,
        };
        if variant.domain_stream() {
            let f_s = encode_specific(&state.specific, &batch.x, &batch.domains)?;
            let probs = softmax_rows(&state.domain_classifier.forward(&f_s)?).map_err(tag("L_cl_DR"))?;
            let partners = select_domain_partners(batch, &row_entropies(&probs).map_err(tag("L_cl_DR"))?)?;
            ctx.dr_features = Some(f_s.select_rows(&partners));
            ctx.dr_partners = Some(partners);
        }
        if variant.causal_stream() {
            let sup_probs = softmax_rows(&state.classifier_sup.forward(&f_sup)?).map_err(tag("L_cl_CR"))?;
            let inf_probs = softmax_rows(&state.classifier_inf.forward(&f_inf)?).map_err(tag("L_cl_CR"))?;
            let inf_entropy = row_entropies(&inf_probs).map_err(tag("L_cl_CR"))?;
            let partners = select_causal_partners(batch, &sup_probs, &inf_entropy)?;
            let (anchors, sources): (Vec<usize>, Vec<usize>) = partners
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.map(|p| (i, p)))
                .unzip();
            ctx.cr_features = Some(f_inf.select_rows(&sources));
            ctx.cr_anchors = anchors;
            ctx.cr_partners = Some(partners);
        }
        Ok(ctx)
    }
}

/// Weights of the invariant-group objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub cls: f64,
    pub dc_inv: f64,
    pub cl_dr: f64,
    pub cl_cr: f64,
}

impl Weights {
    pub fn from_schedule(s: &Schedule) -> Self {
        Weights {
            cls: 1.0,
            dc_inv: s.lambda_inv,
            cl_dr: s.lambda_cl,
            cl_cr: s.lambda_cl,
        }
    }
}

/// Values of the invariant-group terms; disabled terms are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InvariantTerms {
    pub cls_sup: f64,
    pub cls_inf: f64,
    pub dc_inv: f64,
    pub cl_dr: f64,
    pub cl_cr: f64,
    pub total: f64,
    pub f_dr: Option<Matrix>,
    pub f_cr: Option<Matrix>,
}

struct BoundInvariant {
    invariant: BoundMlp,
    sup: BoundMlp,
    inf: BoundMlp,
    fc_dr: BoundLinear,
    fc_cr: BoundLinear,
}

impl BoundInvariant {
    fn grads(&self, tape: &Tape, g: &crate::numerics::Gradients) -> Vec<Matrix> {
        let mut out = Vec::new();
        self.invariant.grads(tape, g, &mut out);
        self.sup.grads(tape, g, &mut out);
        self.inf.grads(tape, g, &mut out);
        self.fc_dr.grads(tape, g, &mut out);
        self.fc_cr.grads(tape, g, &mut out);
        out
    }
}

fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { v } else { tape.scale(v, w) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Matrix::scalar(0.0))))
}

/// Invariant-group objective and its gradient in the group's visiting order.
pub fn invariant_objective(
    state: &ModelState,
    batch: &Batch,
    ctx: &StepContext,
    cfg: &TrainConfig,
    variant: Variant,
    weights: Weights,
) -> Result<(InvariantTerms, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = BoundInvariant {
        invariant: state.invariant.bind(&mut tape, true),
        sup: state.classifier_sup.bind(&mut tape, true),
        inf: state.classifier_inf.bind(&mut tape, true),
        fc_dr: state.fc_dr.bind(&mut tape, true),
        fc_cr: state.fc_cr.bind(&mut tape, true),
    };
    let x = tape.constant(batch.x.clone());
    let f_i = bound.invariant.forward(&mut tape, x)?;
    let m_sup = tape.constant(ctx.mask.sup.clone());
    let f_sup = tape.mul(f_i, m_sup)?;
    let mut terms = InvariantTerms::default();
    let mut parts = Vec::new();

    if variant.mask() {
        let m_inf = tape.constant(ctx.mask.inf.clone());
        let f_inf = tape.mul(f_i, m_inf)?;
        let term = if tape.value(f_sup).is_finite() { "L_cls_inf" } else { "L_cls_sup" };
        let cls = loss_cls(&mut tape, &bound.sup, &bound.inf, f_sup, f_inf, &batch.labels).map_err(tag(term))?;
        terms.cls_sup = tape.value(cls.sup).item();
        terms.cls_inf = tape.value(cls.inf).item();
        parts.push((weights.cls, cls.total));
    } else {
        let logits = bound.sup.forward(&mut tape, f_sup)?;
        let sup = tape.cross_entropy(logits, &batch.labels).map_err(tag("L_cls_sup"))?;
        terms.cls_sup = tape.value(sup).item();
        parts.push((weights.cls, sup));
    }

    if variant.disentangle() {
        let cd = state.domain_classifier.bind(&mut tape, false);
        let inv = loss_dc_inv(&mut tape, &cd, f_i, batch.num_domains).map_err(tag("L_dc_inv"))?;
        terms.dc_inv = tape.value(inv).item();
        parts.push((weights.dc_inv, inv));
    }

    if let Some(partners) = &ctx.dr_features {
        let f_dr = project_pairs_tape(&mut tape, &bound.fc_dr, f_sup, partners.clone())?;
        let l = supcon_tape(&mut tape, f_i, f_dr, &batch.labels, &batch.labels, &cfg.contrastive)?;
        terms.cl_dr = tape.value(l).item();
        terms.f_dr = Some(tape.value(f_dr).clone());
        parts.push((weights.cl_dr, l));
    }

    if let Some(partners) = &ctx.cr_features {
        let width = state.feature_dim();
        if ctx.cr_anchors.is_empty() {
            terms.f_cr = Some(Matrix::zeros(0, width));
        } else {
            let anchors = tape.gather_rows(f_i, &ctx.cr_anchors)?;
            let sup_rows = tape.gather_rows(f_sup, &ctx.cr_anchors)?;
            let f_cr = project_pairs_tape(&mut tape, &bound.fc_cr, sup_rows, partners.clone())?;
            let labels: Vec<usize> = ctx.cr_anchors.iter().map(|&i| batch.labels[i]).collect();
            let l = supcon_tape(&mut tape, anchors, f_cr, &labels, &labels, &cfg.contrastive)?;
            terms.cl_cr = tape.value(l).item();
            terms.f_cr = Some(tape.value(f_cr).clone());
            parts.push((weights.cl_cr, l));
        }
    }

    let total = weighted_sum(&mut tape, &parts)?;
    terms.total = tape.value(total).item();
    let grads = tape.backward(total)?;
    Ok((terms, bound.grads(&tape, &grads)))
}

/// Domain cross-entropy on specific features and its gradient over the
/// specific group.
pub fn specific_objective(state: &ModelState, batch: &Batch) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let encoders: Vec<BoundMlp> = state.specific.iter().map(|e| e.bind(&mut tape, true)).collect();
    let cd = state.domain_classifier.bind(&mut tape, true);
    let f_s = encode_specific_tape(&mut tape, &encoders, &batch.x, &batch.domains)?;
    let loss = loss_dc_spe(&mut tape, &cd, f_s, &batch.domains).map_err(tag("L_dc_spe"))?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    for e in &encoders {
        e.grads(&tape, &grads, &mut out);
    }
    cd.grads(&tape, &grads, &mut out);
    Ok((tape.value(loss).item(), out))
}

/// Mask objective `L_sup - L_inf` under fixed noise and its gradient over the
/// mask network. Encoder and classifiers enter as constants.
pub fn mask_objective(
    state: &ModelState,
    batch: &Batch,
    noise: &Matrix,
    mask_cfg: &MaskConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let f_i_value = encode_invariant(&state.invariant, &batch.x)?;
    let mut tape = Tape::new();
    let net = state.mask_net.bind(&mut tape, true);
    let sup = state.classifier_sup.bind(&mut tape, false);
    let inf = state.classifier_inf.bind(&mut tape, false);
    let f_i = tape.constant(f_i_value);
    let m_sup = mask_sup_tape(&mut tape, &net, f_i, noise, mask_cfg)?;
    let m_inf = tape.affine(m_sup, -1.0, 1.0);
    let f_sup = tape.mul(f_i, m_sup)?;
    let f_inf = tape.mul(f_i, m_inf)?;
    let loss = loss_mask(&mut tape, &sup, &inf, f_sup, f_inf, &batch.labels).map_err(tag("L_mask"))?;
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    net.grads(&tape, &grads, &mut out);
    Ok((tape.value(loss).item(), out))
}

/// Loss values of one step; disabled terms are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub dc_spe: f64,
    pub dc_inv: f64,
    pub cls_sup: f64,
    pub cls_inf: f64,
    pub mask: f64,
    pub cl_dr: f64,
    pub cl_cr: f64,
}

/// Everything needed to check the structural invariants of one step.
#[derive(Clone, Debug)]
pub struct StepAudit {
    /// Group snapshots before the step and after each sub-update, indexed
    /// `[stage][group]` in [`Group::ALL`] order.
    pub snapshots: Vec<[Vec<Matrix>; 3]>,
    pub f_i: Matrix,
    pub mask: MaskPair,
    pub f_sup: Matrix,
    pub f_inf: Matrix,
    pub augmented: AugmentedBatch,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub losses: StepLosses,
    pub mask_sup_mean: f64,
    pub mask_updated: bool,
    pub audit: Option<StepAudit>,
}

fn snapshot_all(state: &ModelState) -> [Vec<Matrix>; 3] {
    Group::ALL.map(|g| state.snapshot(g))
}

/// Turns a non-finite input error into a numeric failure of `term`.
fn tag(term: &'static str) -> impl Fn(DfaError) -> DfaError {
    move |e| match e {
        DfaError::NonFinite(_) => DfaError::NumericFailure { term, epoch: 0 },
        other => other,
    }
}

fn at_epoch(e: DfaError, epoch: usize) -> DfaError {
    match e {
        DfaError::NumericFailure { term, .. } => DfaError::NumericFailure { term, epoch },
        other => other,
    }
}

fn finite(value: f64, term: &'static str, epoch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DfaError::NumericFailure { term, epoch })
    }
}

pub(crate) fn apply_update(state: &mut ModelState, group: Group, grads: &[Matrix], step: SgdStep) {
    let mut slots = std::mem::take(state.slots_mut(group));
    step.apply(state.group_mut(group), grads, &mut slots);
    *state.slots_mut(group) = slots;
}

/// Runs the three sub-updates on `batch`. Gumbel noise for the step is drawn
/// from `rng`.
pub fn train_step(
    state: &mut ModelState,
    batch: &Batch,
    rng: &mut SeededRng,
    cfg: &TrainConfig,
    variant: Variant,
    sched: &Schedule,
    audit: bool,
) -> Result<StepOutcome> {
    let epoch = sched.epoch;
    let noise = draw_gumbel_noise(batch.len(), state.feature_dim(), rng);
    let sgd = SgdStep {
        lr: sched.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut snapshots = Vec::new();
    if audit {
        snapshots.push(snapshot_all(state));
    }
    let mut losses = StepLosses::default();

    if variant.disentangle() {
        let (loss, grads) = specific_objective(state, batch).map_err(|e| at_epoch(e, epoch))?;
        losses.dc_spe = finite(loss, "L_dc_spe", epoch)?;
        apply_update(state, Group::Specific, &grads, sgd);
    }
    if audit {
        snapshots.push(snapshot_all(state));
    }

    let ctx = StepContext::build(state, batch, &noise, &cfg.mask, variant, sched.warmup)
        .map_err(|e| at_epoch(e, epoch))?;
    let (terms, grads) = invariant_objective(state, batch, &ctx, cfg, variant, Weights::from_schedule(sched))
        .map_err(|e| at_epoch(e, epoch))?;
    losses.cls_sup = finite(terms.cls_sup, "L_cls_sup", epoch)?;
    losses.cls_inf = finite(terms.cls_inf, "L_cls_inf", epoch)?;
    losses.dc_inv = finite(terms.dc_inv, "L_dc_inv", epoch)?;
    losses.cl_dr = finite(terms.cl_dr, "L_cl_DR", epoch)?;
    losses.cl_cr = finite(terms.cl_cr, "L_cl_CR", epoch)?;
    finite(terms.total, "L_total", epoch)?;
    let audit_view = audit.then(|| {
        let f_i = encode_invariant(&state.invariant, &batch.x);
        (f_i, terms.f_dr.clone(), terms.f_cr.clone())
    });
    apply_update(state, Group::Invariant, &grads, sgd);
    if audit {
        snapshots.push(snapshot_all(state));
    }

    let mask_updated = variant.mask() && !sched.warmup;
    if mask_updated {
        let (loss, grads) = mask_objective(state, batch, &noise, &cfg.mask).map_err(|e| at_epoch(e, epoch))?;
        losses.mask = finite(loss, "L_mask", epoch)?;
        let step = SgdStep {
            weight_decay: if cfg.mask_weight_decay { cfg.weight_decay } else { 0.0 },
            ..sgd
        };
        apply_update(state, Group::Mask, &grads, step);
    } else if variant.mask() {
        losses.mask = losses.cls_sup - losses.cls_inf;
    }
    if audit {
        snapshots.push(snapshot_all(state));
    }

    let sup = ctx.mask.sup.as_slice();
    let mask_sup_mean = sup.iter().sum::<f64>() / sup.len().max(1) as f64;
    let audit = match audit_view {
        Some((f_i, f_dr, f_cr)) => {
            let f_i = f_i?;
            let (f_sup, f_inf) = apply_masks(&f_i, &ctx.mask)?;
            let width = f_i.cols();
            let cr_labels = ctx.cr_anchors.iter().map(|&i| batch.labels[i]).collect();
            let augmented = AugmentedBatch {
                f_dr: f_dr.unwrap_or_else(|| Matrix::zeros(0, width)),
                f_cr: f_cr.unwrap_or_else(|| Matrix::zeros(0, width)),
                dr_labels: if ctx.dr_partners.is_some() { batch.labels.clone() } else { Vec::new() },
                cr_labels,
                dr_partners: ctx.dr_partners.clone().unwrap_or_default(),
                cr_partners: ctx.cr_partners.clone().unwrap_or_default(),
                cr_anchors: ctx.cr_anchors.clone(),
            };
            Some(StepAudit {
                snapshots,
                f_i,
                mask: ctx.mask,
                f_sup,
                f_inf,
                augmented,
            })
        }
        None => None,
    };
    Ok(StepOutcome {
        losses,
        mask_sup_mean,
        mask_updated,
        audit,
    })
}
