//! Dual-stream hard-feature augmentation.
//!
//! Both streams concatenate an anchor's superior features with a partner
//! feature chosen by minimum information entropy and project the result
//! back to width `d` through a dedicated linear layer:
//!
//! * domain-related (DR): the partner is the domain-specific feature of
//!   another domain in the anchor's group whose domain posterior
//!   `softmax(C_d(f_S))` is most certain;
//! * causal-related (CR): within the anchor's own domain, the partner is the
//!   inferior feature of the anchor's objective class (most probable wrong
//!   class under `C_1(f_sup)`) whose class posterior `softmax(C_2(f_inf))` is
//!   most certain.
//!
//! Partner features enter as constants. Ties resolve to the lowest batch
//! index / class index.

use std::collections::BTreeMap;

use crate::data::Batch;
use crate::numerics::{BoundLinear, LinearLayer, Matrix, Tape, Var};
use crate::{DfaError, Result};

/// Shannon entropy in nats, `0 · ln 0 = 0`.
pub fn information_entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
        return Err(DfaError::InvalidArgument(format!(
            "not a probability distribution (sum {sum})"
        )));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// Entropy of every row of a probability matrix.
pub fn row_entropies(probs: &Matrix) -> Result<Vec<f64>> {
    probs.iter_rows().map(information_entropy).collect()
}

/// `n` groups of `k` batch indices: group `g` holds the `g`-th draw of every
/// domain, in domain order.
pub fn form_groups(batch: &Batch) -> Result<Vec<Vec<usize>>> {
    let k = batch.num_domains;
    let per_domain: Vec<Vec<usize>> = (0..k).map(|d| batch.domain_rows(d)).collect();
    let n = per_domain.first().map_or(0, Vec::len);
    if k == 0 || per_domain.iter().any(|rows| rows.len() != n) || n * k != batch.len() {
        return Err(DfaError::Unbalanced(format!(
            "per-domain counts {:?}",
            per_domain.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    Ok((0..n)
        .map(|g| per_domain.iter().map(|rows| rows[g]).collect())
        .collect())
}

fn argmin_by_entropy(candidates: impl Iterator<Item = usize>, entropy: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for c in candidates {
        match best {
            Some(b) if entropy[c] > entropy[b] || (entropy[c] == entropy[b] && c > b) => {}
            _ => best = Some(c),
        }
    }
    best
}

/// DR partner of every anchor: the lowest-entropy member of its group from
/// a different domain. `domain_entropy[i]` is the entropy of
/// `softmax(C_d(f_S_i))`.
pub fn select_domain_partners(batch: &Batch, domain_entropy: &[f64]) -> Result<Vec<usize>> {
    if batch.num_domains < 2 {
        return Err(DfaError::InvalidArgument(
            "domain-related augmentation needs at least two domains".into(),
        ));
    }
    if domain_entropy.len() != batch.len() {
        return Err(DfaError::shape("select_domain_partners", "one entropy per row required"));
    }
    let mut partners = vec![0; batch.len()];
    for group in form_groups(batch)? {
        for &anchor in &group {
            let candidates = group
                .iter()
                .copied()
                .filter(|&c| batch.domains[c] != batch.domains[anchor]);
            partners[anchor] = argmin_by_entropy(candidates, domain_entropy)
                .expect("k >= 2 leaves a cross-domain candidate");
        }
    }
    Ok(partners)
}

/// Per class present in `rows`, the member with minimum inferior-branch
/// entropy.
pub fn select_inferior_per_class(
    rows: &[usize],
    labels: &[usize],
    inferior_entropy: &[f64],
) -> Result<BTreeMap<usize, usize>> {
    if rows.is_empty() {
        return Err(DfaError::InvalidArgument("empty domain slice".into()));
    }
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in rows {
        best.entry(labels[i])
            .and_modify(|b| {
                let (h, hb) = (inferior_entropy[i], inferior_entropy[*b]);
                if h < hb || (h == hb && i < *b) {
                    *b = i;
                }
            })
            .or_insert(i);
    }
    Ok(best)
}

/// Most probable class other than `label`; lowest index on ties.
pub fn objective_class(probs: &[f64], label: usize) -> Result<usize> {
    if probs.len() < 2 {
        return Err(DfaError::InvalidArgument("objective class needs C >= 2".into()));
    }
    if label >= probs.len() {
        return Err(DfaError::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    let mut best: Option<usize> = None;
    for (c, &p) in probs.iter().enumerate() {
        if c == label {
            continue;
        }
        match best {
            Some(b) if p <= probs[b] => {}
            _ => best = Some(c),
        }
    }
    Ok(best.expect("C >= 2"))
}

/// CR partner of every anchor, or `None` when its domain slice only holds
/// its own class.
///
/// `sup_probs` rows are `softmax(C_1(f_sup))`; `inferior_entropy[i]` is the
/// entropy of `softmax(C_2(f_inf_i))`. When the objective class is absent
/// from the slice, the fallback is the lowest-entropy same-domain row of any
/// other class.
pub fn select_causal_partners(
    batch: &Batch,
    sup_probs: &Matrix,
    inferior_entropy: &[f64],
) -> Result<Vec<Option<usize>>> {
    if sup_probs.rows() != batch.len() || inferior_entropy.len() != batch.len() {
        return Err(DfaError::shape("select_causal_partners", "one row per anchor required"));
    }
    let mut partners = vec![None; batch.len()];
    for d in 0..batch.num_domains {
        let rows = batch.domain_rows(d);
        if rows.is_empty() {
            return Err(DfaError::Unbalanced(format!("domain {d} has no rows")));
        }
        let per_class = select_inferior_per_class(&rows, &batch.labels, inferior_entropy)?;
        for &anchor in &rows {
            let y = batch.labels[anchor];
            let obj = objective_class(sup_probs.row(anchor), y)?;
            partners[anchor] = match per_class.get(&obj) {
                Some(&p) => Some(p),
                None => argmin_by_entropy(
                    rows.iter().copied().filter(|&c| batch.labels[c] != y),
                    inferior_entropy,
                ),
            };
        }
    }
    Ok(partners)
}

/// Selected partners of one step, kept for auditing.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub f_dr: Matrix,
    /// Rows only for anchors listed in `cr_anchors`.
    pub f_cr: Matrix,
    pub dr_labels: Vec<usize>,
    pub cr_labels: Vec<usize>,
    pub dr_partners: Vec<usize>,
    pub cr_partners: Vec<Option<usize>>,
    pub cr_anchors: Vec<usize>,
}

/// Value-level `FC([anchor, partner])` for the given rows.
pub fn project_pairs(
    fc: &LinearLayer,
    anchors: &Matrix,
    partners: &Matrix,
) -> Result<Matrix> {
    if fc.input_dim() != 2 * anchors.cols() {
        return Err(DfaError::shape(
            "project_pairs",
            format!("projection expects {} inputs for width {}", fc.input_dim(), anchors.cols()),
        ));
    }
    fc.forward(&anchors.hconcat(partners)?)
}

/// Tape version of [`project_pairs`]; `partners` is a detached constant.
pub fn project_pairs_tape(
    tape: &mut Tape,
    fc: &BoundLinear,
    anchors: Var,
    partners: Matrix,
) -> Result<Var> {
    let p = tape.constant(partners);
    let joined = tape.concat_cols(anchors, p)?;
    fc.forward(tape, joined)
}

/// Full value-level augmentation of a batch (no gradients).
pub fn augment(
    batch: &Batch,
    f_sup: &Matrix,
    f_s: &Matrix,
    f_inf: &Matrix,
    domain_probs: &Matrix,
    sup_probs: &Matrix,
    inf_probs: &Matrix,
    fc_dr: &LinearLayer,
    fc_cr: &LinearLayer,
) -> Result<AugmentedBatch> {
    let dr_partners = select_domain_partners(batch, &row_entropies(domain_probs)?)?;
    let f_dr = project_pairs(fc_dr, f_sup, &f_s.select_rows(&dr_partners))?;
    let cr_partners = select_causal_partners(batch, sup_probs, &row_entropies(inf_probs)?)?;
    let (cr_anchors, cr_src): (Vec<usize>, Vec<usize>) = cr_partners
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i, p)))
        .unzip();
    let f_cr = if cr_anchors.is_empty() {
        Matrix::zeros(0, fc_cr.output_dim())
    } else {
        project_pairs(fc_cr, &f_sup.select_rows(&cr_anchors), &f_inf.select_rows(&cr_src))?
    };
    Ok(AugmentedBatch {
        f_dr,
        f_cr,
        dr_labels: batch.labels.clone(),
        cr_labels: cr_anchors.iter().map(|&i| batch.labels[i]).collect(),
        dr_partners,
        cr_partners,
        cr_anchors,
    })
}
