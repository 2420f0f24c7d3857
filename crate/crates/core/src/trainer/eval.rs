use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::disentangle::{domain_accuracy, encode_invariant, encode_specific};
use crate::numerics::{argmax, Matrix};
use crate::{DfaError, Result};

use super::model::ModelState;

/// Accuracy and `C × C` confusion counts (row = true class, column =
/// predicted class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

/// Class predictions `argmax C_1(F_I(x))`; the mask is the identity at
/// inference.
pub fn predict(state: &ModelState, x: &Matrix) -> Result<Vec<usize>> {
    let logits = state.classifier_sup.forward(&encode_invariant(&state.invariant, x)?)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

pub fn evaluate(state: &ModelState, dataset: &DomainDataset) -> Result<Evaluation> {
    evaluate_many(state, std::slice::from_ref(dataset))
}

/// Pooled evaluation over several datasets.
pub fn evaluate_many(state: &ModelState, datasets: &[DomainDataset]) -> Result<Evaluation> {
    let c = state.dims.num_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    let mut total = 0usize;
    for ds in datasets.iter().filter(|d| !d.is_empty()) {
        let labels = ds.labels();
        for (y, p) in labels.iter().zip(predict(state, &ds.inputs())?) {
            if *y >= c {
                return Err(DfaError::LabelOutOfRange { label: *y, classes: c });
            }
            confusion[*y][p] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(DfaError::InvalidArgument("nothing to evaluate".into()));
    }
    let hits: usize = (0..c).map(|i| confusion[i][i]).sum();
    Ok(Evaluation {
        accuracy: hits as f64 / total as f64,
        confusion,
    })
}

/// Domain-classifier accuracy on specific and on invariant features of the
/// source domains (domain ids as stored in the samples).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainProbe {
    pub specific_acc: f64,
    pub invariant_acc: f64,
    pub samples: usize,
}

pub fn domain_probe(state: &ModelState, sources: &[DomainDataset]) -> Result<DomainProbe> {
    let rows: Vec<&[f64]> = sources.iter().flat_map(|d| d.samples.iter().map(|s| s.x.as_slice())).collect();
    if rows.is_empty() {
        return Err(DfaError::InvalidArgument("no source samples".into()));
    }
    let x = Matrix::from_rows(&rows)?;
    let domains: Vec<usize> = sources.iter().flat_map(|d| d.domains()).collect();
    let f_s = encode_specific(&state.specific, &x, &domains)?;
    let f_i = encode_invariant(&state.invariant, &x)?;
    Ok(DomainProbe {
        specific_acc: domain_accuracy(&state.domain_classifier, &f_s, &domains)?,
        invariant_acc: domain_accuracy(&state.domain_classifier, &f_i, &domains)?,
        samples: domains.len(),
    })
}

/// Element-wise mean and population standard deviation of `f_I` over one
/// domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub domain: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn export_feature_statistics(state: &ModelState, datasets: &[DomainDataset]) -> Result<Vec<FeatureStats>> {
    datasets
        .iter()
        .map(|ds| {
            if ds.is_empty() {
                return Err(DfaError::InvalidArgument(format!("domain {} is empty", ds.origin)));
            }
            let f = encode_invariant(&state.invariant, &ds.inputs())?;
            let n = f.rows() as f64;
            let mean: Vec<f64> = f.column_sums().as_slice().iter().map(|s| s / n).collect();
            let mut var = vec![0.0; f.cols()];
            for row in f.iter_rows() {
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            Ok(FeatureStats {
                domain: ds.origin,
                count: f.rows(),
                mean,
                std: var.into_iter().map(|v| (v / n).sqrt()).collect(),
            })
        })
        .collect()
}
