//! Per-epoch metrics as JSON lines.

use serde::{Deserialize, Serialize};

use crate::{DfaError, Result};

/// One line of the metrics log. Loss terms are batch means over the epoch;
/// disabled terms are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_dc_spe")]
    pub dc_spe: f64,
    #[serde(rename = "L_dc_inv")]
    pub dc_inv: f64,
    #[serde(rename = "L_cls_sup")]
    pub cls_sup: f64,
    #[serde(rename = "L_cls_inf")]
    pub cls_inf: f64,
    #[serde(rename = "L_mask")]
    pub mask: f64,
    #[serde(rename = "L_cl_DR")]
    pub cl_dr: f64,
    #[serde(rename = "L_cl_CR")]
    pub cl_cr: f64,
    pub lambda_inv: f64,
    pub lambda_cl: f64,
    pub train_acc: f64,
    pub target_acc: f64,
    /// Mean superior-mask entry over the epoch's batches.
    pub mask_sup_mean: f64,
    /// Mask-network updates performed during the epoch.
    pub mask_updates: usize,
}

impl EpochMetrics {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Renders a whole log, one record per line.
pub fn write_log(records: &[EpochMetrics]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

/// Parses a log written by [`write_log`]; blank lines are ignored.
pub fn parse_log(text: &str) -> Result<Vec<EpochMetrics>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| EpochMetrics::parse_line(l).map_err(|e| DfaError::parse(i + 1, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize) -> EpochMetrics {
        EpochMetrics {
            epoch,
            lr: 0.001,
            dc_spe: 1.0986122886681098,
            dc_inv: 0.1 + 0.2,
            cls_sup: 1e-300,
            cls_inf: 3.0,
            mask: -2.0,
            cl_dr: 0.0,
            cl_cr: 0.0,
            lambda_inv: (-5.0f64).exp(),
            lambda_cl: 0.0,
            train_acc: 0.5,
            target_acc: 1.0 / 3.0,
            mask_sup_mean: 1.0,
            mask_updates: 0,
        }
    }

    #[test]
    fn field_names_and_round_trip() {
        let line = record(3).to_line();
        for key in [
            "epoch", "lr", "L_dc_spe", "L_dc_inv", "L_cls_sup", "L_cls_inf", "L_mask", "L_cl_DR",
            "L_cl_CR", "lambda_inv", "lambda_cl", "train_acc", "target_acc",
        ] {
            assert!(line.contains(&format!("\"{key}\":")), "{key} missing from {line}");
        }
        let log = vec![record(0), record(1)];
        let text = write_log(&log);
        assert_eq!(parse_log(&text).unwrap(), log);
        assert_eq!(write_log(&parse_log(&text).unwrap()), text);
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_log("{\"epoch\": 1}\n").is_err());
        assert!(parse_log("not json").is_err());
        let mut v: serde_json::Value = serde_json::from_str(&record(0).to_line()).unwrap();
        v["extra"] = 1.into();
        assert!(parse_log(&v.to_string()).is_err());
        let err = parse_log(&format!("{}\n\n[]\n", record(0).to_line())).unwrap_err();
        assert!(matches!(err, DfaError::Parse { line: 3, .. }));
    }
}
