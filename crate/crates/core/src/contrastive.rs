//! Supervised contrastive alignment between invariant anchors and an
//! augmented stream.
//!
//! Anchor and augmented rows are stacked into one set of `N` embeddings
//! (unit-normalised by default). For every anchor `i` with positive set
//! `P(i)` (all other rows sharing its label):
//!
//! ```text
//! ℓ_i = -(1/|P(i)|) Σ_{p∈P(i)} log( exp(z_i·z_p/τ) / Σ_{a≠i} exp(z_i·z_a/τ) )
//! ```
//!
//! and the loss is the mean over anchors with a non-empty positive set.

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, Tape, Var};
use crate::{DfaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub normalize: bool,
    /// Also use augmented rows as anchors.
    pub symmetric: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.07,
            normalize: true,
            symmetric: false,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DfaError::InvalidConfig(format!(
                "contrastive temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Loss and gradient with respect to the `N × N` logit matrix
/// `S_ia = z_i·z_a/τ`. Rows `0..num_anchors` act as anchors.
pub fn supcon_from_logits(
    logits: &Matrix,
    labels: &[usize],
    num_anchors: usize,
) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if logits.cols() != n || labels.len() != n || num_anchors > n {
        return Err(DfaError::shape(
            "supcon_from_logits",
            format!("{:?} logits, {} labels, {num_anchors} anchors", logits.shape(), labels.len()),
        ));
    }
    let mut grad = Matrix::zeros(n, n);
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..num_anchors {
        let positives = (0..n).filter(|&a| a != i && labels[a] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        counted += 1;
        let row = logits.row(i);
        let max = (0..n).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (row[a] - max).exp()).sum();
        let log_denom = max + denom.ln();
        let inv_p = 1.0 / positives as f64;
        let g = grad.row_mut(i);
        for a in (0..n).filter(|&a| a != i) {
            g[a] = (row[a] - log_denom).exp();
            if labels[a] == labels[i] {
                total += inv_p * (log_denom - row[a]);
                g[a] -= inv_p;
            }
        }
    }
    if counted == 0 {
        return Ok((0.0, Matrix::zeros(n, n)));
    }
    let scale = 1.0 / counted as f64;
    Ok((total * scale, grad.scale(scale)))
}

/// Differentiable supervised contrastive loss of `anchors` against
/// `augmented`. Label slices index the respective rows.
pub fn supcon_tape(
    tape: &mut Tape,
    anchors: Var,
    augmented: Var,
    anchor_labels: &[usize],
    augmented_labels: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (na, nb) = (tape.value(anchors).rows(), tape.value(augmented).rows());
    if anchor_labels.len() != na || augmented_labels.len() != nb {
        return Err(DfaError::shape(
            "supcon",
            format!("{na}+{nb} rows with {}+{} labels", anchor_labels.len(), augmented_labels.len()),
        ));
    }
    let stacked = tape.stack_rows(&[anchors, augmented])?;
    let z = if cfg.normalize { tape.normalize_rows(stacked) } else { stacked };
    let sim = tape.matmul_nt(z, z)?;
    let logits = tape.scale(sim, 1.0 / cfg.temperature);
    let labels: Vec<usize> = anchor_labels.iter().chain(augmented_labels).copied().collect();
    let num_anchors = if cfg.symmetric { na + nb } else { na };
    let (loss, grad) = supcon_from_logits(tape.value(logits), &labels, num_anchors)?;
    tape.scalar(logits, loss, grad)
}

/// Value-level supervised contrastive loss for row-aligned inputs.
pub fn supcon_loss(
    anchors: &Matrix,
    augmented: &Matrix,
    labels: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    supcon_loss_with_labels(anchors, augmented, labels, labels, cfg)
}

pub fn supcon_loss_with_labels(
    anchors: &Matrix,
    augmented: &Matrix,
    anchor_labels: &[usize],
    augmented_labels: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let b = tape.constant(augmented.clone());
    let l = supcon_tape(&mut tape, a, b, anchor_labels, augmented_labels, cfg)?;
    Ok(tape.value(l).item())
}

/// `L_cl = L_cl^DR + L_cl^CR`. `cr_anchors` lists the anchor rows that have a
/// CR feature (row `j` of `f_cr` belongs to anchor `cr_anchors[j]`); other
/// anchors are left out of the CR term entirely.
pub fn loss_cl_total(
    f_i: &Matrix,
    f_dr: &Matrix,
    f_cr: &Matrix,
    labels: &[usize],
    cr_anchors: &[usize],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let dr = supcon_loss(f_i, f_dr, labels, cfg)?;
    let cr_labels: Vec<usize> = cr_anchors.iter().map(|&i| labels[i]).collect();
    let cr = supcon_loss_with_labels(&f_i.select_rows(cr_anchors), f_cr, &cr_labels, &cr_labels, cfg)?;
    Ok(dr + cr)
}
