use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bitbench_core::bench::{self, BenchConfig, BenchReport, MachineInfo};
use bitbench_core::binarize::BinarizerKind;
use bitbench_core::bittensor::read_bittensor;
use bitbench_core::complexity::{self, ModelSpec};
use bitbench_core::corrupt::{robustness_run, CorruptionSpec, InputRange, RobustnessReport};
use bitbench_core::deploy::{self, DeployData};
use bitbench_core::metrics::{self, CorruptionTable, MetricTable, OmReport};
use bitbench_core::nn::{hyper_sweep, train, Dataset, Model, TrainLog};
use bitbench_core::probe;
use bitbench_core::Scalar;
use serde::Serialize;

use crate::config::{Algorithm, Precision, RunConfig};
use crate::report::{output_dir, write_manifest, Outputs};

pub struct RunOutcome {
    pub dir: PathBuf,
    pub failures: Vec<String>,
}

pub fn run(name: &str, cfg: &RunConfig, config_path: Option<&Path>) -> Result<RunOutcome> {
    let mut out = Outputs::create(output_dir(cfg, name))?;
    let failures = match (name, cfg.precision) {
        ("kernel-bench", _) => kernel_bench(cfg, &mut out)?,
        ("train", Precision::F32) => cmd_train::<f32>(cfg, &mut out)?,
        ("train", Precision::F64) => cmd_train::<f64>(cfg, &mut out)?,
        ("sweep", Precision::F32) => cmd_sweep::<f32>(cfg, &mut out)?,
        ("sweep", Precision::F64) => cmd_sweep::<f64>(cfg, &mut out)?,
        ("robust", Precision::F32) => cmd_robust::<f32>(cfg, &mut out)?,
        ("robust", Precision::F64) => cmd_robust::<f64>(cfg, &mut out)?,
        ("probe", Precision::F32) => cmd_probe::<f32>(cfg, &mut out)?,
        ("probe", Precision::F64) => cmd_probe::<f64>(cfg, &mut out)?,
        ("complexity", _) => cmd_complexity(cfg, &mut out)?,
        ("deploy-check", _) => cmd_deploy(cfg, &mut out)?,
        ("metrics", _) => cmd_metrics(cfg, &mut out)?,
        _ => bail!("unknown subcommand {name}"),
    };
    write_manifest(&mut out, name, config_path, cfg, &failures)?;
    Ok(RunOutcome { dir: out.dir, failures })
}

fn kernel_bench(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let b = &cfg.bench;
    let report = match (&b.a, &b.w) {
        (Some(a), Some(w)) => {
            let read = |p: &PathBuf, field: &str| -> Result<_> {
                let f = std::fs::File::open(p).with_context(|| format!("bench.{field}: {}", p.display()))?;
                read_bittensor(std::io::BufReader::new(f)).with_context(|| format!("bench.{field}: {}", p.display()))
            };
            let row = bench::bench_operands(&read(a, "a")?, &read(w, "w")?, b.warmup, b.repetitions)?;
            BenchReport {
                machine: MachineInfo::detect(),
                rows: vec![row],
            }
        }
        (None, None) => bench::run(&BenchConfig {
            sizes: b.sizes.clone(),
            m: b.m,
            k: b.k,
            warmup: b.warmup,
            repetitions: b.repetitions,
            seed: cfg.seed,
        })?,
        _ => bail!("bench.a and bench.w must be given together"),
    };
    out.write_with("bench.csv", |w| report.summary_csv(w))?;
    out.write_with("samples.csv", |w| report.samples_csv(w))?;
    out.write("machine.toml", toml::to_string(&report.machine)?)?;
    let m = &report.machine;
    let md = format!(
        "machine: {} / {}, {} threads, hardware popcount: {}\n\n{}",
        m.arch,
        m.os,
        m.threads,
        m.hardware_popcount,
        report.to_markdown()
    );
    print!("{md}");
    out.write("bench.md", md)?;
    Ok(Vec::new())
}

struct Trained<T> {
    algo: Algorithm,
    result: Result<(Model<T>, TrainLog)>,
}

/// The FP twin first, then every configured algorithm (FP listed once).
fn algorithms(cfg: &RunConfig) -> Result<Vec<Algorithm>> {
    let mut v = vec![Algorithm::Fp];
    v.extend(cfg.binarizer.algorithms()?.into_iter().filter(|a| *a != Algorithm::Fp));
    Ok(v)
}

fn train_all<T: Scalar>(cfg: &RunConfig, tr: &Dataset<T>, te: &Dataset<T>) -> Result<Vec<Trained<T>>> {
    cfg.training.validate().context("training")?;
    let mcfg = cfg.model_config(tr);
    let mut out = Vec::new();
    for algo in algorithms(cfg)? {
        let spec = cfg.binarizer.spec(algo)?;
        let result = Model::new(&mcfg, spec, cfg.seed).map_err(anyhow::Error::from).and_then(|mut m| {
            let log = train(&mut m, tr, Some(te), &cfg.training)?;
            Ok((m, log))
        });
        match &result {
            Ok((_, log)) => log::info!("{}: test accuracy {:.4}", algo.id(), log.final_acc()),
            Err(e) => log::warn!("{}: {e:#}", algo.id()),
        }
        out.push(Trained { algo, result });
    }
    Ok(out)
}

#[derive(Serialize)]
struct TrainRow<'a> {
    algorithm: &'a str,
    train_accuracy: Option<f64>,
    test_accuracy: Option<f64>,
    ratio_to_fp: Option<f64>,
    seconds: Option<f64>,
    error: Option<String>,
}

#[derive(Serialize)]
struct EpochRow<'a> {
    algorithm: &'a str,
    epoch: usize,
    loss: f64,
    train_accuracy: f64,
    test_accuracy: Option<f64>,
    seconds: f64,
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let (tr, te) = cfg.load_dataset::<T>()?;
    let runs = train_all(cfg, &tr, &te)?;
    let fp_acc = runs
        .iter()
        .find(|r| r.algo == Algorithm::Fp)
        .and_then(|r| r.result.as_ref().ok())
        .map(|(_, l)| l.final_acc());
    let mut rows = Vec::new();
    let mut epochs = Vec::new();
    let mut failures = Vec::new();
    for r in &runs {
        let id = r.algo.id();
        match &r.result {
            Ok((_, log)) => {
                rows.push(TrainRow {
                    algorithm: id,
                    train_accuracy: Some(log.final_train_acc),
                    test_accuracy: log.final_test_acc,
                    ratio_to_fp: fp_acc.filter(|&f| f > 0.0).map(|f| log.final_acc() / f),
                    seconds: Some(log.total_seconds),
                    error: None,
                });
                epochs.extend(log.epochs.iter().map(|e| EpochRow {
                    algorithm: id,
                    epoch: e.epoch,
                    loss: e.loss,
                    train_accuracy: e.train_acc,
                    test_accuracy: e.test_acc,
                    seconds: e.seconds,
                }));
            }
            Err(e) => {
                failures.push(format!("{id}: {e:#}"));
                rows.push(TrainRow {
                    algorithm: id,
                    train_accuracy: None,
                    test_accuracy: None,
                    ratio_to_fp: None,
                    seconds: None,
                    error: Some(format!("{e:#}")),
                });
            }
        }
    }
    let mut md = String::from("| algorithm | train acc | test acc | / FP |\n|---|---|---|---|\n");
    for r in &rows {
        let f = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.4}"));
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |",
            r.algorithm,
            f(r.train_accuracy),
            f(r.test_accuracy),
            f(r.ratio_to_fp)
        );
    }
    print!("{md}");
    out.write_csv("summary.csv", &rows)?;
    out.write_csv("epochs.csv", &epochs)?;
    out.write("summary.md", md)?;
    Ok(failures)
}

#[derive(Serialize)]
struct CellRow<'a> {
    algorithm: &'a str,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    accuracy: Option<f64>,
    seconds: f64,
    error: Option<String>,
}

#[derive(Serialize)]
struct SweepRow<'a> {
    algorithm: &'a str,
    cells: usize,
    finished: usize,
    mean_accuracy: Option<f64>,
    std: f64,
}

fn cmd_sweep<T: Scalar>(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let (tr, te) = cfg.load_dataset::<T>()?;
    let grid = cfg.sweep.grid(&cfg.training);
    for (i, c) in grid.iter().enumerate() {
        c.validate().with_context(|| format!("sweep cell {i}"))?;
    }
    let mcfg = cfg.model_config(&tr);
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for algo in algorithms(cfg)? {
        let id = algo.id();
        let template = Model::<T>::new(&mcfg, cfg.binarizer.spec(algo)?, cfg.seed)?;
        let res = hyper_sweep(&template, &tr, Some(&te), &grid)?;
        for c in &res.cells {
            if let Some(e) = &c.error {
                failures.push(format!("{id}: lr {} seed {}: {e}", c.config.learning_rate, c.config.seed));
            }
            cells.push(CellRow {
                algorithm: id,
                learning_rate: c.config.learning_rate,
                epochs: c.config.epochs,
                batch_size: c.config.batch_size,
                seed: c.config.seed,
                accuracy: c.accuracy,
                seconds: c.seconds,
                error: c.error.clone(),
            });
        }
        let n = res.accuracies.len();
        rows.push(SweepRow {
            algorithm: id,
            cells: res.cells.len(),
            finished: n,
            mean_accuracy: (n > 0).then(|| res.accuracies.iter().sum::<f64>() / n as f64),
            std: res.std,
        });
    }
    let mut md = String::from("| algorithm | cells | finished | mean acc | std |\n|---|---|---|---|---|\n");
    for r in &rows {
        let mean = r.mean_accuracy.map_or("-".into(), |v| format!("{v:.4}"));
        let _ = writeln!(md, "| {} | {} | {} | {} | {:.4} |", r.algorithm, r.cells, r.finished, mean, r.std);
    }
    print!("{md}");
    out.write_csv("cells.csv", &cells)?;
    out.write_csv("summary.csv", &rows)?;
    out.write("summary.md", md)?;
    Ok(failures)
}

#[derive(Serialize)]
struct GapRow<'a> {
    algorithm: &'a str,
    severity: u8,
    sigma: f64,
    accuracy: f64,
    gap: f64,
}

#[derive(Serialize)]
struct RobustRow<'a> {
    algorithm: &'a str,
    clean_accuracy: f64,
    mean_gap: f64,
    /// Percent; FP gap over binarized gap, averaged across severities.
    om_corr: Option<f64>,
}

fn cmd_robust<T: Scalar>(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let (tr, te) = cfg.load_dataset::<T>()?;
    let range = InputRange::of(&tr.x)?;
    let c = &cfg.corruption;
    let specs: Vec<CorruptionSpec> = c
        .severities
        .iter()
        .map(|&severity| CorruptionSpec {
            severity,
            sigma_schedule: c.sigma_schedule,
            seed: c.seed.unwrap_or(cfg.seed),
            ..CorruptionSpec::new(severity, 0)
        })
        .collect();
    for s in &specs {
        s.validate().context("corruption")?;
    }
    let mut failures = Vec::new();
    let mut reports: Vec<(Algorithm, RobustnessReport)> = Vec::new();
    for t in train_all(cfg, &tr, &te)? {
        match t.result.and_then(|(m, _)| Ok(robustness_run(&m, &te, &specs, range)?)) {
            Ok(r) => reports.push((t.algo, r)),
            Err(e) => failures.push(format!("{}: {e:#}", t.algo.id())),
        }
    }
    let fp = reports.iter().find(|(a, _)| *a == Algorithm::Fp).map(|(_, r)| r.clone());
    let mut gaps = Vec::new();
    let mut rows = Vec::new();
    for (algo, r) in &reports {
        let id = algo.id();
        gaps.extend(r.severities.iter().map(|s| GapRow {
            algorithm: id,
            severity: s.severity,
            sigma: s.sigma,
            accuracy: s.accuracy,
            gap: s.gap,
        }));
        let om_corr = match (&fp, algo) {
            (Some(f), Algorithm::Bin(_)) => {
                let task = RobustnessReport::gap_task("gaussian_noise", f, r)?;
                match metrics::om_robust(&[task]) {
                    Ok(o) => Some(o.value),
                    Err(e) => {
                        log::warn!("{id}: om_corr undefined: {e}");
                        None
                    }
                }
            }
            _ => None,
        };
        let g = r.gaps();
        rows.push(RobustRow {
            algorithm: id,
            clean_accuracy: r.clean_accuracy,
            mean_gap: if g.is_empty() { 0.0 } else { g.iter().sum::<f64>() / g.len() as f64 },
            om_corr,
        });
    }
    let mut md = String::from("| algorithm | clean acc | mean gap | OM_corr |\n|---|---|---|---|\n");
    for r in &rows {
        let om = r.om_corr.map_or("-".into(), |v| format!("{v:.2}"));
        let _ = writeln!(md, "| {} | {:.4} | {:.4} | {} |", r.algorithm, r.clean_accuracy, r.mean_gap, om);
    }
    print!("{md}");
    out.write_csv("gaps.csv", &gaps)?;
    out.write_csv("summary.csv", &rows)?;
    out.write("summary.md", md)?;
    Ok(failures)
}

fn cmd_probe<T: Scalar>(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let table = probe::sweep::<T>(&cfg.probe).context("probe")?;
    let failures = table
        .cells
        .iter()
        .filter_map(|c| c.error.as_ref().map(|e| format!("{} size {} dim {}: {e}", c.kind, c.size, c.dim)))
        .collect();
    out.write_with("probe.csv", |w| table.to_csv(w))?;
    let md = table.to_markdown();
    print!("{md}");
    out.write("probe.md", md)?;
    Ok(failures)
}

#[derive(Serialize)]
struct ComplexityCsv {
    algorithm: BinarizerKind,
    params_total: u64,
    params_fp_remaining: u64,
    flops_total: u64,
    flops_fp_remaining: u64,
    r_c: f64,
    r_s: f64,
    om_comp: f64,
}

fn cmd_complexity(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let model = match &cfg.complexity.spec {
        Some(p) => ModelSpec::read(p).with_context(|| format!("complexity.spec: {}", p.display()))?,
        None => ModelSpec::resnet18(),
    };
    let kinds: Vec<BinarizerKind> = cfg
        .binarizer
        .algorithms()?
        .into_iter()
        .filter_map(|a| match a {
            Algorithm::Bin(k) => Some(k),
            Algorithm::Fp => None,
        })
        .collect();
    let rows = complexity::report(&model, &kinds)?;
    let csv: Vec<ComplexityCsv> = rows
        .iter()
        .map(|r| ComplexityCsv {
            algorithm: r.algorithm,
            params_total: r.counts.params_total,
            params_fp_remaining: r.counts.params_fp_remaining,
            flops_total: r.counts.flops_total,
            flops_fp_remaining: r.counts.flops_fp_remaining,
            r_c: r.r_c,
            r_s: r.r_s,
            om_comp: r.om_comp,
        })
        .collect();
    out.write_csv("complexity.csv", &csv)?;
    let md = complexity::report_markdown(&model, &rows);
    print!("{md}");
    out.write("complexity.md", md)?;
    Ok(Vec::new())
}

fn cmd_deploy(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let data = match &cfg.deploy.data {
        Some(p) => DeployData::read(p).with_context(|| format!("deploy.data: {}", p.display()))?,
        None => DeployData::shipped(),
    };
    let grid = deploy::matrix(&data.algorithms, &data.libraries)?;
    out.write_with("deploy.csv", |w| grid.to_csv(w))?;
    let mut md = grid.to_markdown();
    md.push_str("\n| algorithm | deployable |\n|---|---|\n");
    for a in &grid.algorithms {
        let ok = grid.deployable_anywhere(a).unwrap_or(false);
        let _ = writeln!(md, "| {a} | {} |", if ok { "yes" } else { "no" });
    }
    print!("{md}");
    out.write("deploy.md", md)?;
    Ok(Vec::new())
}

#[derive(Serialize)]
struct OmRow<'a> {
    formula: &'a str,
    algorithm: &'a str,
    value: Option<f64>,
    published: Option<f64>,
    abs_error: Option<f64>,
    cells_used: usize,
    cells_missing: usize,
}

fn cmd_metrics(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<String>> {
    let m = &cfg.metrics;
    let open = |p: &Option<PathBuf>, field: &str| -> Result<Option<std::fs::File>> {
        p.as_ref()
            .map(|p| std::fs::File::open(p).with_context(|| format!("metrics.{field}: {}", p.display())))
            .transpose()
    };
    let t1 = match open(&m.table1, "table1")? {
        Some(f) => MetricTable::from_csv(f).context("metrics.table1")?,
        None => metrics::published_table1()?,
    };
    let t2 = match open(&m.table2, "table2")? {
        Some(f) => MetricTable::from_csv(f).context("metrics.table2")?,
        None => metrics::published_table2()?,
    };
    let corr = match open(&m.corruption, "corruption")? {
        Some(f) => CorruptionTable::from_csv(f).context("metrics.corruption")?,
        None => metrics::published_cifar10c()?,
    };
    let report = OmReport::recompute(&t1, &t2, &corr)?;
    let rows: Vec<OmRow> = report
        .entries
        .iter()
        .map(|e| OmRow {
            formula: e.formula.id(),
            algorithm: &e.column,
            value: e.value,
            published: e.published,
            abs_error: e.value.zip(e.published).map(|(a, b)| (a - b).abs()),
            cells_used: e.cells_used,
            cells_missing: e.cells_missing,
        })
        .collect();
    out.write_csv("om.csv", &rows)?;
    let text = report.to_text();
    print!("{text}");
    println!("max |recomputed - published| = {:.4}", report.max_abs_error());
    out.write("om.txt", text)?;
    Ok(Vec::new())
}
