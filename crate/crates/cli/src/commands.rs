use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dfa::data::{generate, leave_one_out, snapshot, DatasetSpec, DomainDataset, Split};
use dfa::trainer::{
    domain_probe, evaluate, export_feature_statistics, run_gradcheck_suite, run_training, write_log, Checkpoint,
    DomainProbe, Evaluation, GradCheckReport, Variant,
};
use dfa::DfaError;

use crate::config::ExperimentConfig;

/// Raised when the gradient suite exceeds its tolerance.
#[derive(Debug, thiserror::Error)]
#[error("gradient check exceeded tolerance {0:e}")]
pub struct ToleranceBreach(pub f64);

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

fn echo_config(cfg: &ExperimentConfig) -> Result<()> {
    write(&cfg.output_dir.join("config.toml"), &cfg.to_toml())
}

/// Domains from the snapshot directory if one is configured, otherwise
/// generated in memory.
pub fn load_domains(cfg: &ExperimentConfig) -> Result<(DatasetSpec, Vec<DomainDataset>)> {
    match &cfg.data_dir {
        Some(dir) => {
            let (manifest, domains) =
                snapshot::load_dir(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
            Ok((manifest.spec, domains))
        }
        None => Ok((cfg.dataset.clone(), generate(&cfg.dataset)?)),
    }
}

pub fn generate_cmd(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let domains = generate(&cfg.dataset)?;
    let dir = cfg.output_dir.join("data");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    snapshot::save_dir(&dir, &cfg.dataset, &domains)?;
    echo_config(cfg)?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub variant: Variant,
    pub seed: u64,
    pub target: usize,
    pub train_acc: f64,
    pub target_acc: f64,
    pub evaluation: Evaluation,
    pub probe: DomainProbe,
}

fn train_target(cfg: &ExperimentConfig, domains: &[DomainDataset], target: usize, dir: Option<&Path>) -> Result<TargetReport> {
    let split = leave_one_out(domains, target)?;
    let (state, log) = run_training(&cfg.train, &split, cfg.variant)?;
    let evaluation = evaluate(&state, &split.target)?;
    let report = TargetReport {
        variant: cfg.variant,
        seed: cfg.train.seed,
        target,
        train_acc: log.last().map_or(0.0, |m| m.train_acc),
        target_acc: evaluation.accuracy,
        evaluation,
        probe: domain_probe(&state, &split.sources)?,
    };
    if let Some(dir) = dir {
        write(&dir.join("metrics.jsonl"), &write_log(&log))?;
        write(&dir.join("checkpoint.json"), &Checkpoint::new(&state, &cfg.train, cfg.variant).to_json())?;
        write(&dir.join("evaluation.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        let all: Vec<DomainDataset> = split.sources.iter().chain([&split.target]).cloned().collect();
        write(&dir.join("features.jsonl"), &jsonl(&export_feature_statistics(&state, &all)?))?;
    }
    Ok(report)
}

pub fn target_dir(out: &Path, target: usize) -> PathBuf {
    out.join(format!("target_{target}"))
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<Vec<TargetReport>> {
    let (spec, domains) = load_domains(cfg)?;
    let targets = cfg.target_domain.domains(spec.total_domains())?;
    let mut reports = Vec::with_capacity(targets.len());
    for t in targets {
        let dir = target_dir(&cfg.output_dir, t);
        reports.push(train_target(cfg, &domains, t, Some(&dir)).with_context(|| format!("target domain {t}"))?);
    }
    let summary: Vec<_> = reports
        .iter()
        .map(|r| Cell {
            variant: r.variant,
            seed: r.seed,
            target: r.target,
            target_acc: r.target_acc,
        })
        .collect();
    write(&cfg.output_dir.join("results.jsonl"), &jsonl(&summary))?;
    echo_config(cfg)?;
    Ok(reports)
}

/// Evaluates a stored checkpoint on the configured held-out domain.
pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<TargetReport> {
    let text = fs::read_to_string(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let ckpt = Checkpoint::parse(&text)?;
    let state = ckpt.state()?;
    let (spec, domains) = load_domains(cfg)?;
    let target = match cfg.target_domain.domains(spec.total_domains())?.as_slice() {
        [t] => *t,
        _ => bail!(DfaError::InvalidConfig("eval needs a single target domain".into())),
    };
    let split: Split = leave_one_out(&domains, target)?;
    let dims = dfa::trainer::run::dims_for(&split)?;
    if dims != state.dims {
        bail!(DfaError::InvalidConfig(format!(
            "checkpoint dims {:?} do not match dataset dims {dims:?}",
            state.dims
        )));
    }
    let evaluation = evaluate(&state, &split.target)?;
    let report = TargetReport {
        variant: ckpt.variant,
        seed: ckpt.config.seed,
        target,
        train_acc: dfa::trainer::evaluate_many(&state, &split.sources)?.accuracy,
        target_acc: evaluation.accuracy,
        evaluation,
        probe: domain_probe(&state, &split.sources)?,
    };
    write(&cfg.output_dir.join("evaluation.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(report)
}

/// One `(variant, seed, target)` result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub seed: u64,
    pub target: usize,
    pub target_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, std }
    }
}

/// One variant across all targets; `average` summarises the per-seed means
/// over targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: Variant,
    pub targets: Vec<(usize, Summary)>,
    pub average: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub cells: Vec<Cell>,
    pub rows: Vec<Row>,
}

impl Ablation {
    pub fn row(&self, variant: Variant) -> Option<&Row> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let targets: Vec<usize> = self.rows.first().map_or(Vec::new(), |r| r.targets.iter().map(|t| t.0).collect());
        let _ = write!(out, "{:<8}", "variant");
        for t in &targets {
            let _ = write!(out, " {:>15}", format!("target {t}"));
        }
        let _ = writeln!(out, " {:>15}", "avg");
        let pct = |s: &Summary| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std);
        for row in &self.rows {
            let _ = write!(out, "{:<8}", row.variant.name());
            for (_, s) in &row.targets {
                let _ = write!(out, " {:>15}", pct(s));
            }
            let _ = writeln!(out, " {:>15}", pct(&row.average));
        }
        out
    }
}

fn aggregate(mut cells: Vec<Cell>, seeds: &[u64], targets: &[usize]) -> Ablation {
    cells.sort_by_key(|c| (c.variant, c.seed, c.target));
    let rows = Variant::ALL
        .iter()
        .map(|&variant| {
            let acc = |seed: u64, target: usize| {
                cells
                    .iter()
                    .find(|c| c.variant == variant && c.seed == seed && c.target == target)
                    .map_or(f64::NAN, |c| c.target_acc)
            };
            let per_target = targets
                .iter()
                .map(|&t| (t, Summary::of(&seeds.iter().map(|&s| acc(s, t)).collect::<Vec<_>>())))
                .collect();
            let per_seed: Vec<f64> = seeds
                .iter()
                .map(|&s| targets.iter().map(|&t| acc(s, t)).sum::<f64>() / targets.len() as f64)
                .collect();
            Row {
                variant,
                targets: per_target,
                average: Summary::of(&per_seed),
            }
        })
        .collect();
    Ablation { cells, rows }
}

/// Runs every variant on every seed and target. Each seed sets both the
/// dataset and the training seed. With a snapshot directory the data stays
/// fixed and only the training seed varies.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Ablation> {
    let total = match &cfg.data_dir {
        Some(_) => load_domains(cfg)?.0.total_domains(),
        None => cfg.dataset.total_domains(),
    };
    let targets = cfg.target_domain.domains(total)?;
    for v in Variant::ALL {
        cfg.train.check_variant(v)?;
    }
    let data: Vec<(u64, Vec<DomainDataset>)> = cfg
        .seeds
        .iter()
        .map(|&s| Ok((s, load_domains(&cfg.clone().with_seed(s))?.1)))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::with_capacity(Variant::ALL.len() * data.len() * targets.len());
    for v in Variant::ALL {
        for i in 0..data.len() {
            jobs.extend(targets.iter().map(|&t| (v, i, t)));
        }
    }
    let cells = jobs
        .par_iter()
        .map(|&(variant, i, target)| {
            let (seed, domains) = &data[i];
            let mut cell_cfg = cfg.clone().with_seed(*seed);
            cell_cfg.variant = variant;
            let report = train_target(&cell_cfg, domains, target, None)
                .with_context(|| format!("{variant} seed {seed} target {target}"))?;
            Ok(Cell {
                variant,
                seed: *seed,
                target,
                target_acc: report.target_acc,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(cells, &cfg.seeds, &targets))
}

pub fn ablate_cmd(cfg: &ExperimentConfig) -> Result<Ablation> {
    let ablation = run_ablation(cfg)?;
    let out = &cfg.output_dir;
    write(&out.join("ablation_cells.jsonl"), &jsonl(&ablation.cells))?;
    write(&out.join("ablation_rows.jsonl"), &jsonl(&ablation.rows))?;
    write(&out.join("ablation_table.txt"), &ablation.table())?;
    echo_config(cfg)?;
    Ok(ablation)
}

pub fn gradcheck_report_lines(report: &GradCheckReport) -> String {
    let mut out = String::new();
    for t in &report.terms {
        let verdict = if t.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<10} instances={} max_rel_error={:.3e} {verdict}",
            t.term, t.instances, t.max_rel_error
        );
    }
    out
}

pub fn gradcheck_cmd(seed: u64, instances: usize, out: Option<&Path>) -> Result<GradCheckReport> {
    if instances == 0 {
        bail!(DfaError::InvalidConfig("instances must be positive".into()));
    }
    let report = run_gradcheck_suite(seed, instances)?;
    if let Some(dir) = out {
        write(&dir.join("gradcheck.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(report)
}
