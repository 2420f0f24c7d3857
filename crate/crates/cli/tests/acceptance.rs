//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dfa::augmentation::{
    information_entropy, objective_class, select_causal_partners, select_domain_partners, select_inferior_per_class,
};
use dfa::contrastive::{supcon_loss_with_labels, ContrastiveConfig};
use dfa::data::{generate, leave_one_out, Batch, DatasetSpec};
use dfa::numerics::{Matrix, SeededRng};
use dfa::trainer::run::run_training_with;
use dfa::trainer::{
    mask_selectivity, parse_log, ramp_up, run_gradcheck_suite, Group, ProbeConfig, StepOutcome, TrainConfig, Variant,
};
use dfa_cli::commands::{run_ablation, TargetReport};
use dfa_cli::config::{ExperimentConfig, Target};
use tempfile::TempDir;

type Verdict = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn dfa_cmd(args: &[&str]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_dfa"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("dfa {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(start.elapsed())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let report = run_gradcheck_suite(0, 20).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = report.terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    check(report.terms.len() == 7, || format!("{} terms checked", report.terms.len()))?;
    check(report.terms.iter().all(|t| t.instances >= 20), || "fewer than 20 instances".into())?;
    check(worst < 1e-4, || format!("max relative error {worst:.3e}: {report:?}"))?;
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("7 terms x 20 instances, max rel error {worst:.2e}, {elapsed:.1?}"))
}

fn random_distribution(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| if rng.below(4) == 0 { 0.0 } else { rng.uniform() })
        .collect();
    let sum: f64 = raw.iter().sum();
    if sum == 0.0 {
        let mut p = vec![0.0; n];
        p[rng.below(n)] = 1.0;
        return p;
    }
    raw.iter().map(|v| v / sum).collect()
}

/// Domain-balanced batch in random interleaved order.
fn random_batch(rng: &mut SeededRng) -> (Batch, usize) {
    let k = 2 + rng.below(3);
    let n = 1 + rng.below(32 / k);
    let classes = 2 + rng.below(5);
    let mut domains: Vec<usize> = (0..k).flat_map(|d| std::iter::repeat_n(d, n)).collect();
    rng.shuffle(&mut domains);
    let labels: Vec<usize> = domains.iter().map(|_| rng.below(classes)).collect();
    let batch = Batch::from_parts(Matrix::zeros(k * n, 1), labels, domains, k).expect("valid batch");
    (batch, classes)
}

/// Entropy-like scores from a small set so that ties occur.
fn tied_scores(rng: &mut SeededRng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.below(5) as f64 * 0.25).collect()
}

fn lowest_entropy(candidates: impl Iterator<Item = usize>, h: &[f64]) -> Option<usize> {
    candidates.fold(None, |best, c| match best {
        Some(b) if h[b] <= h[c] => Some(b),
        _ => Some(c),
    })
}

fn oracle_domain_partners(batch: &Batch, h: &[f64]) -> Vec<usize> {
    let rank = |i: usize| (0..i).filter(|&j| batch.domains[j] == batch.domains[i]).count();
    (0..batch.len())
        .map(|i| {
            let candidates =
                (0..batch.len()).filter(|&j| rank(j) == rank(i) && batch.domains[j] != batch.domains[i]);
            lowest_entropy(candidates, h).expect("another domain exists")
        })
        .collect()
}

fn oracle_objective_class(p: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for c in 0..p.len() {
        if c != y && (best == usize::MAX || p[c] > p[best]) {
            best = c;
        }
    }
    best
}

fn oracle_causal_partners(batch: &Batch, probs: &Matrix, h: &[f64]) -> Vec<Option<usize>> {
    (0..batch.len())
        .map(|i| {
            let same_domain = || (0..batch.len()).filter(move |&j| batch.domains[j] == batch.domains[i]);
            let obj = oracle_objective_class(probs.row(i), batch.labels[i]);
            lowest_entropy(same_domain().filter(|&j| batch.labels[j] == obj), h)
                .or_else(|| lowest_entropy(same_domain().filter(|&j| batch.labels[j] != batch.labels[i]), h))
        })
        .collect()
}

fn oracle_supcon(anchors: &Matrix, augmented: &Matrix, la: &[usize], lb: &[usize], tau: f64) -> f64 {
    let unit = |r: &[f64]| {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter().map(|v| v / norm).collect::<Vec<f64>>()
    };
    let z: Vec<Vec<f64>> = anchors.iter_rows().chain(augmented.iter_rows()).map(unit).collect();
    let labels: Vec<usize> = la.iter().chain(lb).copied().collect();
    let sim = |i: usize, j: usize| z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    let mut counted = 0;
    for i in 0..anchors.rows() {
        let positives: Vec<usize> = (0..z.len()).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..z.len()).filter(|&a| a != i).map(|a| sim(i, a).exp()).sum();
        let li: f64 = positives.iter().map(|&p| -(sim(i, p).exp() / denom).ln()).sum();
        total += li / positives.len() as f64;
        counted += 1;
    }
    if counted == 0 { 0.0 } else { total / counted as f64 }
}

fn oracle_equivalence() -> Verdict {
    let mut rng = SeededRng::new(2024);
    let trials = 200;
    let mut worst_entropy: f64 = 0.0;
    let mut worst_supcon: f64 = 0.0;
    for t in 0..trials {
        let len = 1 + rng.below(12);
        let p = random_distribution(&mut rng, len);
        let direct: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
        worst_entropy = worst_entropy.max((information_entropy(&p).map_err(|e| e.to_string())? - direct).abs());

        let (batch, classes) = random_batch(&mut rng);
        let h = tied_scores(&mut rng, batch.len());
        let got = select_domain_partners(&batch, &h).map_err(|e| e.to_string())?;
        check(got == oracle_domain_partners(&batch, &h), || format!("DR selection differs on trial {t}"))?;

        let rows: Vec<usize> = batch.domain_rows(0);
        let per_class = select_inferior_per_class(&rows, &batch.labels, &h).map_err(|e| e.to_string())?;
        let mut expect = BTreeMap::new();
        for &i in &rows {
            let y = batch.labels[i];
            if !expect.contains_key(&y) {
                let best = lowest_entropy(rows.iter().copied().filter(|&j| batch.labels[j] == y), &h);
                expect.insert(y, best.expect("class present"));
            }
        }
        check(per_class == expect, || format!("per-class inferior selection differs on trial {t}"))?;

        let probs_rows: Vec<Vec<f64>> = (0..batch.len())
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| 1.0 + rng.below(4) as f64).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let probs = Matrix::from_rows(&probs_rows).expect("rectangular");
        for (i, row) in probs_rows.iter().enumerate() {
            let y = batch.labels[i];
            let got = objective_class(row, y).map_err(|e| e.to_string())?;
            check(got == oracle_objective_class(row, y), || format!("objective class differs on trial {t}"))?;
        }
        let got = select_causal_partners(&batch, &probs, &h).map_err(|e| e.to_string())?;
        check(got == oracle_causal_partners(&batch, &probs, &h), || format!("CR selection differs on trial {t}"))?;

        let b = 1 + rng.below(32);
        let d = 1 + rng.below(8);
        let c = 1 + rng.below(6);
        let gaussian = |rng: &mut SeededRng| {
            Matrix::from_vec(b, d, (0..b * d).map(|_| rng.normal()).collect()).expect("sized")
        };
        let (za, zb) = (gaussian(&mut rng), gaussian(&mut rng));
        let la: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
        let lb: Vec<usize> = if rng.below(2) == 0 { la.clone() } else { (0..b).map(|_| rng.below(c)).collect() };
        let tau = rng.uniform_in(0.05, 1.0);
        let cfg = ContrastiveConfig {
            temperature: tau,
            ..ContrastiveConfig::default()
        };
        let got = supcon_loss_with_labels(&za, &zb, &la, &lb, &cfg).map_err(|e| e.to_string())?;
        worst_supcon = worst_supcon.max((got - oracle_supcon(&za, &zb, &la, &lb, tau)).abs());
    }
    check(worst_entropy < 1e-10, || format!("entropy error {worst_entropy:e}"))?;
    check(worst_supcon < 1e-10, || format!("contrastive error {worst_supcon:e}"))?;
    Ok(format!(
        "{trials} instances each; selections exact; entropy err {worst_entropy:.1e}, contrastive err {worst_supcon:.1e}"
    ))
}

fn structural_invariants() -> Verdict {
    let spec = DatasetSpec::default();
    let split = leave_one_out(&generate(&spec).map_err(|e| e.to_string())?, 3).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let mut steps = 0usize;
    let mut cr_anchors = 0usize;
    let mut failure: Option<String> = None;
    let mut observer = |epoch: usize, step: usize, batch: &Batch, out: &StepOutcome| -> dfa::Result<()> {
        let audit = out.audit.as_ref().expect("observer enables audits");
        let fail = |msg: String| format!("epoch {epoch} step {step}: {msg}");
        let mut problems = Vec::new();
        let (sup, inf) = (&audit.mask.sup, &audit.mask.inf);
        if sup.as_slice().iter().zip(inf.as_slice()).any(|(s, i)| s + i != 1.0) {
            problems.push("M_sup + M_inf != 1".to_string());
        }
        let recon = audit.f_sup.zip_map(&audit.f_inf, |a, b| a + b)?;
        let scale = audit.f_i.as_slice().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if recon.max_abs_diff(&audit.f_i) > 1e-12 * scale {
            problems.push("f_sup + f_inf != f_I".to_string());
        }
        if epoch < cfg.warmup_epochs && sup.as_slice().iter().any(|&v| v != 1.0) {
            problems.push("mask not identity during warm-up".to_string());
        }
        let s = &audit.snapshots;
        let same = |a: usize, b: usize, g: usize| s[a][g] == s[b][g];
        let (spe, inv, msk) = (0, 1, 2);
        debug_assert_eq!(Group::ALL.len(), 3);
        if !(same(0, 1, inv) && same(0, 1, msk) && same(1, 2, spe) && same(1, 2, msk) && same(2, 3, spe) && same(2, 3, inv)) {
            problems.push("parameter group touched outside its sub-update".to_string());
        }
        if epoch < cfg.warmup_epochs && !same(0, 3, msk) {
            problems.push("mask network changed during warm-up".to_string());
        }
        let aug = &audit.augmented;
        if aug.dr_labels != batch.labels || aug.f_dr.rows() != batch.len() {
            problems.push("DR labels differ from anchors".to_string());
        }
        for (i, &p) in aug.dr_partners.iter().enumerate() {
            if batch.domains[p] == batch.domains[i] {
                problems.push(format!("DR partner {p} of {i} shares its domain"));
            }
        }
        let anchors: Vec<usize> = (0..batch.len()).filter(|&i| aug.cr_partners[i].is_some()).collect();
        if anchors != aug.cr_anchors || aug.f_cr.rows() != anchors.len() {
            problems.push("CR anchors inconsistent".to_string());
        }
        if aug.cr_labels != anchors.iter().map(|&i| batch.labels[i]).collect::<Vec<_>>() {
            problems.push("CR labels differ from anchors".to_string());
        }
        for (i, partner) in aug.cr_partners.iter().enumerate() {
            match partner {
                Some(p) if batch.domains[*p] != batch.domains[i] || batch.labels[*p] == batch.labels[i] => {
                    problems.push(format!("CR partner {p} of {i} breaks same-domain/other-class"));
                }
                None if batch
                    .domain_rows(batch.domains[i])
                    .iter()
                    .any(|&j| batch.labels[j] != batch.labels[i]) =>
                {
                    problems.push(format!("anchor {i} skipped although a partner exists"));
                }
                _ => {}
            }
        }
        steps += 1;
        cr_anchors += anchors.len();
        if failure.is_none() && !problems.is_empty() {
            failure = Some(fail(problems.join("; ")));
        }
        Ok(())
    };
    run_training_with(&cfg, &split, Variant::Dfa, Some(&mut observer as &mut dfa::trainer::run::Observer<'_>)).map_err(|e| e.to_string())?;
    if let Some(f) = failure {
        return Err(f);
    }
    check(steps > 0 && cr_anchors > 0, || "no steps audited".into())?;
    Ok(format!("{steps} steps over 10 epochs audited, {cr_anchors} CR anchors checked"))
}

struct FullRun {
    dir: TempDir,
    elapsed: Duration,
}

fn full_run() -> Result<FullRun, String> {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let elapsed = dfa_cmd(&["train", "--seed", "0", "--out", path(dir.path())])?;
    Ok(FullRun { dir, elapsed })
}

fn schedule_conformance(run: &FullRun) -> Verdict {
    let text = fs::read_to_string(run.dir.path().join("target_3/metrics.jsonl")).map_err(|e| e.to_string())?;
    let log = parse_log(&text).map_err(|e| e.to_string())?;
    check(log.len() == 50, || format!("{} epochs logged", log.len()))?;
    for m in &log {
        let e = m.epoch;
        let warm = e < 5;
        if warm {
            check(m.lambda_cl == 0.0, || format!("epoch {e}: lambda_cl {}", m.lambda_cl))?;
            check(m.mask_sup_mean == 1.0, || format!("epoch {e}: mask mean {}", m.mask_sup_mean))?;
            check(m.mask_updates == 0, || format!("epoch {e}: {} mask updates", m.mask_updates))?;
            let expect = (-5.0 * (1.0 - e as f64 / 5.0).powi(2)).exp();
            check((m.lambda_inv - expect).abs() < 1e-15, || format!("epoch {e}: lambda_inv {}", m.lambda_inv))?;
            check(m.lambda_inv == ramp_up(e, 5), || format!("epoch {e}: ramp mismatch"))?;
        } else {
            check(m.lambda_inv == 1.0, || format!("epoch {e}: lambda_inv {}", m.lambda_inv))?;
            check(m.lambda_cl == 0.001, || format!("epoch {e}: lambda_cl {}", m.lambda_cl))?;
            check(m.mask_updates > 0, || format!("epoch {e}: mask frozen after warm-up"))?;
        }
        let lr = if e < 40 { 0.001 } else { 0.001 * 0.1 };
        check(m.lr == lr, || format!("epoch {e}: lr {}", m.lr))?;
    }
    Ok(format!("50 epochs: warm-up 0-4 clean, lambda_inv 1 from 5, lr {} -> {} at 40", log[39].lr, log[40].lr))
}

fn disentanglement(run: &FullRun) -> Verdict {
    let text = fs::read_to_string(run.dir.path().join("target_3/evaluation.json")).map_err(|e| e.to_string())?;
    let report: TargetReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let k = 3.0;
    let n = report.probe.samples as f64;
    let half_width = 1.96 * ((1.0 / k) * (1.0 - 1.0 / k) / n).sqrt();
    let (lo, hi) = (1.0 / k - half_width, 1.0 / k + half_width);
    let (s, i) = (report.probe.specific_acc, report.probe.invariant_acc);
    let detail = format!(
        "C_d acc on f_S {s:.3} (> 0.9), on f_I {i:.3} (band [{lo:.3}, {hi:.3}], n = {n}), {:.1?}",
        run.elapsed
    );
    check(s > 0.9 && (lo..=hi).contains(&i) && run.elapsed < Duration::from_secs(600), || detail.clone())?;
    Ok(detail)
}

fn ood_regression() -> Verdict {
    let cfg = ExperimentConfig {
        target_domain: Target::Domain(3),
        seeds: (0..5).collect(),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let ablation = run_ablation(&cfg).map_err(|e| format!("{e:#}"))?;
    let elapsed = start.elapsed();
    let mean = |v: Variant| ablation.row(v).expect("every variant present").average.mean;
    let (dfa, m3, m1) = (mean(Variant::Dfa), mean(Variant::Model3), mean(Variant::Model1));
    let detail = format!(
        "target 3, 5 seeds: DFA {:.2}%, Model3 {:.2}%, Model1 {:.2}%, DFA - Model3 = {:+.2} pp (need >= 2), grid {elapsed:.1?}",
        100.0 * dfa,
        100.0 * m3,
        100.0 * m1,
        100.0 * (dfa - m3)
    );
    check(dfa > m3 && dfa > m1 && dfa - m3 >= 0.02 && elapsed < Duration::from_secs(7200), || detail.clone())?;
    Ok(detail)
}

fn mask_selectivity_criterion() -> Verdict {
    let mut selective = 0;
    let mut parts = Vec::new();
    for seed in 0..5 {
        let r = mask_selectivity(&ProbeConfig {
            seed,
            ..ProbeConfig::default()
        })
        .map_err(|e| e.to_string())?;
        selective += usize::from(r.selective());
        parts.push(format!("{:.2}/{:.2}", r.causal_mask_mean, r.spurious_mask_mean));
    }
    let detail = format!("{selective}/5 seeds selective (causal/spurious M_sup: {})", parts.join(", "));
    check(selective >= 4, || detail.clone())?;
    Ok(detail)
}

fn determinism(run: &FullRun) -> Verdict {
    let tmp = TempDir::new().map_err(|e| e.to_string())?;
    let again = tmp.path().join("train");
    dfa_cmd(&["train", "--seed", "0", "--out", path(&again)])?;
    let mut compared = 0;
    for f in ["metrics.jsonl", "checkpoint.json", "evaluation.json", "features.jsonl"] {
        let a = fs::read(run.dir.path().join("target_3").join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(again.join("target_3").join(f)).map_err(|e| e.to_string())?;
        check(a == b, || format!("train {f} differs between repeats"))?;
        compared += 1;
    }
    let small = tmp.path().join("small.toml");
    fs::write(
        &small,
        "target_domain = \"all\"\nseeds = [0, 1]\n[dataset]\nsamples_per_domain = 30\n[train]\nepochs = 3\nwarmup_epochs = 1\nramp_up_epochs = 1\n",
    )
    .map_err(|e| e.to_string())?;
    let runs: [(&str, &[&str], &[&str]); 3] = [
        ("generate", &[], &["data/manifest.json", "data/domain_0.csv", "data/domain_3.csv"]),
        ("train", &[], &["results.jsonl", "target_0/metrics.jsonl", "target_3/metrics.jsonl"]),
        ("ablate", &[], &["ablation_cells.jsonl", "ablation_rows.jsonl", "ablation_table.txt"]),
    ];
    for (cmd, extra, files) in runs {
        let (a, b) = (tmp.path().join(format!("{cmd}_a")), tmp.path().join(format!("{cmd}_b")));
        for out in [&a, &b] {
            let mut args = vec![cmd, "--config", path(&small), "--out", path(out)];
            args.extend_from_slice(extra);
            dfa_cmd(&args)?;
        }
        for f in files {
            let (x, y) = (fs::read(a.join(f)).map_err(|e| e.to_string())?, fs::read(b.join(f)).map_err(|e| e.to_string())?);
            check(x == y, || format!("{cmd} {f} differs between repeats"))?;
            compared += 1;
        }
    }
    let (a, b) = (tmp.path().join("gc_a"), tmp.path().join("gc_b"));
    dfa_cmd(&["gradcheck", "--instances", "5", "--out", path(&a)])?;
    dfa_cmd(&["gradcheck", "--instances", "5", "--out", path(&b)])?;
    check(fs::read(a.join("gradcheck.json")).ok() == fs::read(b.join("gradcheck.json")).ok(), || {
        "gradcheck report differs".into()
    })?;
    compared += 1;
    Ok(format!("{compared} artifacts byte-identical across repeated generate/train/ablate/gradcheck"))
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

fn main() {
    let run = full_run();
    let shared = |f: fn(&FullRun) -> Verdict| match &run {
        Ok(r) => guarded(|| f(r)),
        Err(e) => Err(format!("default training run failed: {e}")),
    };
    let results = [
        ("1 gradient suite", guarded(gradient_suite)),
        ("2 oracle equivalence", guarded(oracle_equivalence)),
        ("3 structural invariants", guarded(structural_invariants)),
        ("4 schedule conformance", shared(schedule_conformance)),
        ("5 disentanglement", shared(disentanglement)),
        ("6 OOD regression", guarded(ood_regression)),
        ("7 mask selectivity", guarded(mask_selectivity_criterion)),
        ("8 determinism", shared(determinism)),
    ];
    let mut failed = 0;
    for (name, verdict) in &results {
        match verdict {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
