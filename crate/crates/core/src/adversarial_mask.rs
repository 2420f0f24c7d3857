//! Adversarial dimension masks over invariant features.
//!
//! `MaskNet` maps `f_I` to a keep/drop logit pair per feature dimension.
//! A two-class Gumbel-softmax turns each pair into the keep probability
//! `M_sup[j]`; the complement `M_inf = 1 - M_sup` gates the inferior branch.
//! Classifier `C_1` reads `f_sup = f_I ⊙ M_sup`, classifier `C_2` reads
//! `f_inf = f_I ⊙ M_inf`. The encoder and classifiers minimise both
//! cross-entropies; the mask minimises `L_sup - L_inf`.

use serde::{Deserialize, Serialize};

use crate::numerics::tape::sigmoid;
use crate::numerics::{BoundMlp, Matrix, Mlp, SeededRng, Tape, Var};
use crate::{DfaError, Result};

/// Share of dimensions forced into the superior branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRatio {
    None,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Gumbel-softmax temperature `τ_g`.
    pub temperature: f64,
    pub ratio: MaskRatio,
    /// Hard 0/1 masks in the forward pass, soft gradient backward.
    pub straight_through: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            temperature: 1.0,
            ratio: MaskRatio::None,
            straight_through: false,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DfaError::InvalidConfig(format!(
                "mask temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let MaskRatio::Fixed(r) = self.ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(DfaError::InvalidConfig(format!("mask ratio {r} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Complementary superior / inferior masks, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub sup: Matrix,
    pub inf: Matrix,
}

impl MaskPair {
    pub fn identity(rows: usize, dim: usize) -> Self {
        MaskPair {
            sup: Matrix::filled(rows, dim, 1.0),
            inf: Matrix::zeros(rows, dim),
        }
    }

    fn from_sup(sup: Matrix) -> Self {
        let inf = sup.map(|m| 1.0 - m);
        MaskPair { sup, inf }
    }
}

/// Gumbel noise for one batch: `rows × 2d`, keep draws first then drop draws.
pub fn draw_gumbel_noise(rows: usize, dim: usize, rng: &mut SeededRng) -> Matrix {
    let values = (0..rows * 2 * dim).map(|_| rng.gumbel()).collect();
    Matrix::from_vec(rows, 2 * dim, values).expect("sized")
}

fn keep_probabilities(logits: &Matrix, noise: &Matrix, temperature: f64) -> Result<Matrix> {
    logits.check_same_shape(noise, "sample_mask")?;
    let d = logits.cols() / 2;
    let mut out = Matrix::zeros(logits.rows(), d);
    for r in 0..logits.rows() {
        let (l, g) = (logits.row(r), noise.row(r));
        for j in 0..d {
            let z = (l[j] + g[j] - l[d + j] - g[d + j]) / temperature;
            out.set(r, j, sigmoid(z));
        }
    }
    Ok(out)
}

/// Hard mask keeping the `⌈r·d⌉` largest keep probabilities of each row
/// (lowest index wins ties), or thresholding at ½ when no ratio is fixed.
fn harden(soft: &Matrix, ratio: MaskRatio) -> Matrix {
    let mut hard = Matrix::zeros(soft.rows(), soft.cols());
    for r in 0..soft.rows() {
        let row = soft.row(r);
        match ratio {
            MaskRatio::None => {
                for (h, &s) in hard.row_mut(r).iter_mut().zip(row) {
                    *h = if s >= 0.5 { 1.0 } else { 0.0 };
                }
            }
            MaskRatio::Fixed(fraction) => {
                let keep = ((fraction * row.len() as f64).ceil() as usize).min(row.len());
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                for &j in &idx[..keep] {
                    hard.set(r, j, 1.0);
                }
            }
        }
    }
    hard
}

fn uses_hard_mask(cfg: &MaskConfig) -> bool {
    cfg.straight_through || matches!(cfg.ratio, MaskRatio::Fixed(_))
}

/// Samples `M_sup`/`M_inf` for every row of `f_i` with explicit Gumbel noise.
/// During warm-up the masks are the identity (`M_sup = 1`).
pub fn sample_mask(
    mask_net: &Mlp,
    f_i: &Matrix,
    noise: &Matrix,
    cfg: &MaskConfig,
    warmup: bool,
) -> Result<MaskPair> {
    cfg.validate()?;
    if warmup {
        return Ok(MaskPair::identity(f_i.rows(), f_i.cols()));
    }
    let logits = mask_net.forward(f_i)?;
    if logits.cols() != 2 * f_i.cols() {
        return Err(DfaError::shape(
            "sample_mask",
            format!("mask net emits {} logits for {} dims", logits.cols(), f_i.cols()),
        ));
    }
    let soft = keep_probabilities(&logits, noise, cfg.temperature)?;
    let sup = if uses_hard_mask(cfg) { harden(&soft, cfg.ratio) } else { soft };
    Ok(MaskPair::from_sup(sup))
}

/// [`sample_mask`] drawing its own noise.
pub fn sample_mask_with_rng(
    mask_net: &Mlp,
    f_i: &Matrix,
    rng: &mut SeededRng,
    cfg: &MaskConfig,
    warmup: bool,
) -> Result<MaskPair> {
    let noise = draw_gumbel_noise(f_i.rows(), f_i.cols(), rng);
    sample_mask(mask_net, f_i, &noise, cfg, warmup)
}

/// Differentiable `M_sup` on the tape; `f_i` should be a constant so that
/// only the mask network receives gradient.
pub fn mask_sup_tape(
    tape: &mut Tape,
    mask_net: &BoundMlp,
    f_i: Var,
    noise: &Matrix,
    cfg: &MaskConfig,
) -> Result<Var> {
    let d = tape.value(f_i).cols();
    let logits = mask_net.forward(tape, f_i)?;
    tape.value(logits).check_same_shape(noise, "mask_sup_tape")?;
    let keep = tape.slice_cols(logits, 0, d)?;
    let drop = tape.slice_cols(logits, d, 2 * d)?;
    let diff = tape.sub(keep, drop)?;
    let noise_diff = {
        let mut m = Matrix::zeros(noise.rows(), d);
        for r in 0..noise.rows() {
            for j in 0..d {
                m.set(r, j, noise.get(r, j) - noise.get(r, d + j));
            }
        }
        tape.constant(m)
    };
    let z = tape.add(diff, noise_diff)?;
    let z = tape.scale(z, 1.0 / cfg.temperature);
    let soft = tape.sigmoid(z);
    if uses_hard_mask(cfg) {
        let hard = harden(tape.value(soft), cfg.ratio);
        tape.straight_through(soft, hard)
    } else {
        Ok(soft)
    }
}

/// `(f_I ⊙ M_sup, f_I ⊙ M_inf)`.
pub fn apply_masks(f_i: &Matrix, pair: &MaskPair) -> Result<(Matrix, Matrix)> {
    let sup = f_i.zip_map(&pair.sup, |f, m| f * m)?;
    let inf = f_i.zip_map(&pair.inf, |f, m| f * m)?;
    Ok((sup, inf))
}

#[derive(Clone, Copy, Debug)]
pub struct ClsLosses {
    pub sup: Var,
    pub inf: Var,
    pub total: Var,
}

/// Superior and inferior classification losses and their sum.
pub fn loss_cls(
    tape: &mut Tape,
    c1: &BoundMlp,
    c2: &BoundMlp,
    f_sup: Var,
    f_inf: Var,
    labels: &[usize],
) -> Result<ClsLosses> {
    let sup_logits = c1.forward(tape, f_sup)?;
    let sup = tape.cross_entropy(sup_logits, labels)?;
    let inf_logits = c2.forward(tape, f_inf)?;
    let inf = tape.cross_entropy(inf_logits, labels)?;
    let total = tape.add(sup, inf)?;
    Ok(ClsLosses { sup, inf, total })
}

/// Mask objective `L_sup - L_inf`.
pub fn loss_mask(
    tape: &mut Tape,
    c1: &BoundMlp,
    c2: &BoundMlp,
    f_sup: Var,
    f_inf: Var,
    labels: &[usize],
) -> Result<Var> {
    let l = loss_cls(tape, c1, c2, f_sup, f_inf, labels)?;
    tape.sub(l.sup, l.inf)
}
