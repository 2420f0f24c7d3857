//! Dual-path feature disentanglement.
//!
//! A domain-invariant encoder `F_I` is shared by all domains; every source
//! domain gets its own domain-specific encoder `F_S[d]`. The domain
//! classifier `C_d` is trained only on specific features (cross-entropy over
//! the `k` source domains) and then used, frozen, to push the invariant
//! features towards a uniform domain posterior (mean squared distance of the
//! softmax from `1/k`).

use serde::{Deserialize, Serialize};

use crate::numerics::{argmax, BoundMlp, Matrix, Mlp, SeededRng, Tape, Var};
use crate::{DfaError, Result};

/// Layer widths of every network in the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Hidden widths of `F_I` and each `F_S`.
    pub encoder_hidden: Vec<usize>,
    /// Feature width `d` shared by `f_I` and `f_S`.
    pub feature_dim: usize,
    pub domain_classifier_hidden: Vec<usize>,
    pub mask_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            encoder_hidden: vec![64, 64],
            feature_dim: 32,
            domain_classifier_hidden: vec![64],
            mask_hidden: vec![64],
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.encoder_hidden.contains(&0)
            || self.domain_classifier_hidden.contains(&0)
            || self.mask_hidden.contains(&0)
        {
            return Err(DfaError::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        dims
    }

    pub fn encoder(&self, input_dim: usize, rng: &mut SeededRng) -> Mlp {
        Mlp::init(&Self::dims(input_dim, &self.encoder_hidden, self.feature_dim), rng)
    }

    pub fn domain_classifier(&self, num_domains: usize, rng: &mut SeededRng) -> Mlp {
        Mlp::init(
            &Self::dims(self.feature_dim, &self.domain_classifier_hidden, num_domains),
            rng,
        )
    }

    pub fn mask_net(&self, rng: &mut SeededRng) -> Mlp {
        Mlp::init(
            &Self::dims(self.feature_dim, &self.mask_hidden, 2 * self.feature_dim),
            rng,
        )
    }
}

/// `f_I = F_I(x)` for every row of the batch.
pub fn encode_invariant(encoder: &Mlp, x: &Matrix) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(DfaError::shape("encode_invariant", "empty batch"));
    }
    encoder.forward(x)
}

fn check_routing(encoders: usize, x: &Matrix, domains: &[usize]) -> Result<()> {
    if domains.len() != x.rows() {
        return Err(DfaError::shape(
            "encode_specific",
            format!("{} domain ids for {} rows", domains.len(), x.rows()),
        ));
    }
    if let Some(&d) = domains.iter().find(|&&d| d >= encoders) {
        return Err(DfaError::UnknownDomain {
            domain: d,
            available: encoders,
        });
    }
    Ok(())
}

/// Row `i` is `F_S[domains[i]](x_i)`.
pub fn encode_specific(encoders: &[Mlp], x: &Matrix, domains: &[usize]) -> Result<Matrix> {
    check_routing(encoders.len(), x, domains)?;
    let width = encoders.first().map_or(0, Mlp::output_dim);
    let mut out = Matrix::zeros(x.rows(), width);
    for (d, enc) in encoders.iter().enumerate() {
        let rows: Vec<usize> = (0..x.rows()).filter(|&i| domains[i] == d).collect();
        if rows.is_empty() {
            continue;
        }
        let f = enc.forward(&x.select_rows(&rows))?;
        for (j, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(f.row(j));
        }
    }
    Ok(out)
}

/// Tape version of [`encode_specific`]; gradients flow into whichever
/// encoders were bound trainable.
pub fn encode_specific_tape(
    tape: &mut Tape,
    encoders: &[BoundMlp],
    x: &Matrix,
    domains: &[usize],
) -> Result<Var> {
    check_routing(encoders.len(), x, domains)?;
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(x.rows());
    for (d, enc) in encoders.iter().enumerate() {
        let rows: Vec<usize> = (0..x.rows()).filter(|&i| domains[i] == d).collect();
        if rows.is_empty() {
            continue;
        }
        let input = tape.constant(x.select_rows(&rows));
        parts.push(enc.forward(tape, input)?);
        order.extend(rows);
    }
    let stacked = tape.stack_rows(&parts)?;
    // stacked row j holds batch row order[j]; invert to batch order
    let mut inverse = vec![0; order.len()];
    for (j, &i) in order.iter().enumerate() {
        inverse[i] = j;
    }
    tape.gather_rows(stacked, &inverse)
}

/// Domain classification loss on specific features: cross-entropy against
/// the source-domain labels.
pub fn loss_dc_spe(
    tape: &mut Tape,
    domain_classifier: &BoundMlp,
    f_s: Var,
    domain_labels: &[usize],
) -> Result<Var> {
    let logits = domain_classifier.forward(tape, f_s)?;
    tape.cross_entropy(logits, domain_labels)
}

/// Invariance loss: mean over rows and domains of `(softmax(C_d(f_I)) - 1/k)^2`.
///
/// Bind `domain_classifier` as non-trainable: only the invariant features
/// are meant to receive gradient here.
pub fn loss_dc_inv(
    tape: &mut Tape,
    domain_classifier: &BoundMlp,
    f_i: Var,
    k: usize,
) -> Result<Var> {
    let logits = domain_classifier.forward(tape, f_i)?;
    let probs = tape.softmax_rows(logits)?;
    tape.mse_uniform(probs, k)
}

/// Fraction of rows whose arg-max domain prediction matches.
pub fn domain_accuracy(domain_classifier: &Mlp, features: &Matrix, domains: &[usize]) -> Result<f64> {
    let logits = domain_classifier.forward(features)?;
    if domains.len() != logits.rows() || domains.is_empty() {
        return Err(DfaError::shape("domain_accuracy", "label count mismatch"));
    }
    let hits = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == domains[r])
        .count();
    Ok(hits as f64 / domains.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Parameterized};

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn naive_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (li, layer) in mlp.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.output_dim()];
            for (o, n) in next.iter_mut().enumerate() {
                *n = layer.bias.get(0, o);
                for (i, hv) in h.iter().enumerate() {
                    *n += layer.weight.get(o, i) * hv;
                }
            }
            if li + 1 < mlp.layers.len() {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = next;
        }
        h
    }

    #[test]
    fn invariant_encoder_examples() {
        let mut rng = SeededRng::new(1);
        let arch = Architecture { encoder_hidden: vec![6, 5], feature_dim: 4, ..Default::default() };
        let mut enc = arch.encoder(3, &mut rng);
        let x = random(5, 3, &mut rng);

        let f = encode_invariant(&enc, &x).unwrap();
        for r in 0..5 {
            for (a, b) in f.row(r).iter().zip(naive_forward(&enc, x.row(r))) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let perm = [3, 0, 4, 1, 2];
        let fp = encode_invariant(&enc, &x.select_rows(&perm)).unwrap();
        assert_eq!(fp, f.select_rows(&perm));

        enc.zero_out();
        assert!(encode_invariant(&enc, &x).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(encode_invariant(&enc, &Matrix::zeros(0, 3)).is_err());
        assert!(encode_invariant(&enc, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn specific_encoders_route_by_domain() {
        let mut rng = SeededRng::new(2);
        let arch = Architecture { encoder_hidden: vec![4], feature_dim: 3, ..Default::default() };
        let mut encs = vec![arch.encoder(2, &mut rng), arch.encoder(2, &mut rng)];
        let x = random(4, 2, &mut rng);
        let domains = [1, 0, 0, 1];

        let f = encode_specific(&encs, &x, &domains).unwrap();
        for r in 0..4 {
            let expect = naive_forward(&encs[domains[r]], x.row(r));
            for (a, b) in f.row(r).iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let mut tape = Tape::new();
        let bound: Vec<BoundMlp> = encs.iter().map(|e| e.bind(&mut tape, true)).collect();
        let fv = encode_specific_tape(&mut tape, &bound, &x, &domains).unwrap();
        assert!(tape.value(fv).max_abs_diff(&f) < 1e-15);

        encs[0].zero_out();
        let f = encode_specific(&encs, &x, &domains).unwrap();
        assert!(f.row(1).iter().chain(f.row(2)).all(|&v| v == 0.0));
        assert!(f.row(0).iter().any(|&v| v != 0.0));

        let same = vec![encs[1].clone(), encs[1].clone()];
        assert_eq!(
            encode_specific(&same, &x, &[0, 0, 0, 0]).unwrap(),
            encode_specific(&same, &x, &[1, 0, 1, 0]).unwrap()
        );
        assert!(matches!(
            encode_specific(&encs, &x, &[0, 2, 0, 0]),
            Err(DfaError::UnknownDomain { domain: 2, available: 2 })
        ));
    }

    #[test]
    fn loss_values_at_symmetric_points() {
        // zero classifier -> uniform logits
        let mut rng = SeededRng::new(3);
        let mut cd = Architecture::default().domain_classifier(3, &mut rng);
        cd.zero_out();
        let mut tape = Tape::new();
        let bcd = cd.bind(&mut tape, true);
        let f = tape.constant(random(6, 32, &mut rng));
        let spe = loss_dc_spe(&mut tape, &bcd, f, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert!((tape.value(spe).item() - 3f64.ln()).abs() < 1e-15);
        let inv = loss_dc_inv(&mut tape, &bcd, f, 3).unwrap();
        assert_eq!(tape.value(inv).item(), 0.0);
    }

    #[test]
    fn one_hot_invariance_loss() {
        // a saturated posterior reproduces ((2/3)^2 + 2 (1/3)^2) / 3
        let mut tape = Tape::new();
        let p = tape.constant(Matrix::row_vector(vec![1.0, 0.0, 0.0]));
        let l = tape.mse_uniform(p, 3).unwrap();
        assert!((tape.value(l).item() - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn specific_loss_gradient_checks() {
        for seed in 0..5 {
            let mut rng = SeededRng::new(seed);
            let arch = Architecture { encoder_hidden: vec![5], feature_dim: 4, domain_classifier_hidden: vec![3], ..Default::default() };
            let encs = vec![arch.encoder(3, &mut rng), arch.encoder(3, &mut rng)];
            let cd = arch.domain_classifier(2, &mut rng);
            let x = random(6, 3, &mut rng);
            let domains = [0, 0, 0, 1, 1, 1];
            let mut params: Vec<Matrix> = encs.iter().flat_map(|e| e.params()).cloned().collect();
            params.extend(cd.params().into_iter().cloned());
            let err = grad_check(&params, 1e-5, |p| {
                let mut encs = encs.clone();
                let mut cd = cd.clone();
                let dst = encs.iter_mut().flat_map(|e| e.params_mut()).chain(cd.params_mut());
                for (d, s) in dst.zip(p) {
                    *d = s.clone();
                }
                let mut tape = Tape::new();
                let be: Vec<BoundMlp> = encs.iter().map(|e| e.bind(&mut tape, true)).collect();
                let bc = cd.bind(&mut tape, true);
                let f = encode_specific_tape(&mut tape, &be, &x, &domains)?;
                let loss = loss_dc_spe(&mut tape, &bc, f, &domains)?;
                let g = tape.backward(loss)?;
                let mut out = Vec::new();
                be.iter().for_each(|b| b.grads(&tape, &g, &mut out));
                bc.grads(&tape, &g, &mut out);
                Ok((tape.value(loss).item(), out))
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn invariance_loss_leaves_classifier_without_gradient() {
        let mut rng = SeededRng::new(4);
        let arch = Architecture { encoder_hidden: vec![5], feature_dim: 4, domain_classifier_hidden: vec![3], ..Default::default() };
        let enc = arch.encoder(3, &mut rng);
        let cd = arch.domain_classifier(3, &mut rng);
        let mut tape = Tape::new();
        let be = enc.bind(&mut tape, true);
        let bc = cd.bind(&mut tape, false);
        let x = tape.constant(random(4, 3, &mut rng));
        let f = be.forward(&mut tape, x).unwrap();
        let loss = loss_dc_inv(&mut tape, &bc, f, 3).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut cd_grads = Vec::new();
        bc.grads(&tape, &g, &mut cd_grads);
        assert!(cd_grads.iter().all(|m| m.frobenius_norm() == 0.0));
        let mut enc_grads = Vec::new();
        be.grads(&tape, &g, &mut enc_grads);
        assert!(enc_grads.iter().any(|m| m.frobenius_norm() > 0.0));
    }
}
