//! Replays the checked-in fuzz corpus through the parsers on stable
//! toolchains. Seeds named after a defect must be rejected; the others must
//! parse and survive a write/parse round trip.

use std::fs;
use std::path::PathBuf;

use dfa::data::snapshot::{parse_domain, write_domain, Manifest};
use dfa::trainer::{parse_log, write_log, Checkpoint};
use dfa_cli::config::ExperimentConfig;

const VALID: [&str; 7] = [
    "domain_0.csv",
    "domain_target.csv",
    "manifest.json",
    "tiny.toml",
    "fixed_ratio.toml",
    "tiny.json",
    "two_epochs.jsonl",
];

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, String)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, fs::read_to_string(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(out.len() >= 3, "{target} corpus too small");
    out
}

fn replay(target: &str, accepts: impl Fn(&str) -> bool) {
    for (name, text) in seeds(target) {
        assert_eq!(accepts(&text), VALID.contains(&name.as_str()), "{target}/{name}");
    }
}

#[test]
fn snapshot_corpus() {
    replay("parse_snapshot", |text| match parse_domain(text) {
        Ok((header, dataset)) => {
            assert_eq!(parse_domain(&write_domain(header, &dataset)).unwrap(), (header, dataset));
            true
        }
        Err(_) => false,
    });
}

#[test]
fn manifest_corpus() {
    replay("parse_manifest", |text| match Manifest::parse(text) {
        Ok(m) => {
            assert_eq!(Manifest::parse(&m.to_json()).unwrap(), m);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn config_corpus() {
    replay("parse_config", |text| match ExperimentConfig::parse(text) {
        Ok(cfg) => {
            let echoed = cfg.to_toml();
            assert_eq!(ExperimentConfig::parse(&echoed).unwrap().to_toml(), echoed);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn checkpoint_corpus() {
    replay("parse_checkpoint", |text| match Checkpoint::parse(text) {
        Ok(ckpt) => {
            assert!(ckpt.state().unwrap().is_finite());
            assert_eq!(Checkpoint::parse(&ckpt.to_json()).unwrap(), ckpt);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn metrics_corpus() {
    replay("parse_metrics", |text| match parse_log(text) {
        Ok(log) => {
            assert_eq!(parse_log(&write_log(&log)).unwrap(), log);
            true
        }
        Err(_) => false,
    });
}
