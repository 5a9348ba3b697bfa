//! The subcommands, as plain functions over paths.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use vqprompt::backbone::{pretrain_backbone, PretrainReport};
use vqprompt::checkpoint::Checkpoint;
use vqprompt::cil::{run_continual, ContinualRun, EpochLoss};
use vqprompt::data::{generate_benchmark, read_benchmark_dir, write_benchmark_dir};
use vqprompt::metrics::{forgetting_csv, metrics_csv};

use crate::config::{ExperimentConfig, RunMode};

pub const CONFIG_FILE: &str = "config.toml";
pub const MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FORGETTING_FILE: &str = "forgetting.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Generates the benchmark into `out_dir` together with a config snapshot.
pub fn cmd_generate(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let bench = generate_benchmark(&config.benchmark_params())?;
    write_benchmark_dir(out_dir, &bench)?;
    write(&out_dir.join(CONFIG_FILE), config.to_toml())?;
    info!("wrote {} tasks to {}", bench.sequence.len(), out_dir.display());
    Ok(())
}

/// Pretrains a backbone on the benchmark's pretraining split and stores it
/// frozen.
pub fn cmd_pretrain(config: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<PretrainReport> {
    let bench = read_benchmark_dir(data_dir).with_context(|| format!("reading benchmark {}", data_dir.display()))?;
    let (backbone, report) = pretrain_backbone(
        &bench.pretrain_train,
        Some(&bench.pretrain_test),
        config.backbone_config(),
        &config.pretrain_config(),
    )?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Checkpoint {
        backbone,
        pool: None,
        head: None,
    }
    .save(out)?;
    info!(
        "pretraining: train accuracy {:.3}, test accuracy {:.3}",
        report.train_accuracy,
        report.test_accuracy.unwrap_or(f64::NAN)
    );
    Ok(report)
}

fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,ce,vq,commit,total\n");
    for e in trace {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.ce, e.vq, e.commit, e.total);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSummary {
    pub faa: f64,
    pub caa: f64,
}

/// Runs the continual sequence and writes every artifact into `out_dir`.
pub fn cmd_run(config: &ExperimentConfig, data_dir: &Path, backbone: &Path, out_dir: &Path) -> Result<RunSummary> {
    let bench = read_benchmark_dir(data_dir).with_context(|| format!("reading benchmark {}", data_dir.display()))?;
    let ckpt = Checkpoint::load(backbone).with_context(|| format!("loading backbone {}", backbone.display()))?;
    ensure!(ckpt.backbone.is_frozen(), "backbone checkpoint is not frozen");
    if ckpt.backbone.config != config.backbone_config() {
        bail!(
            "backbone checkpoint was built for {:?}, the config describes {:?}",
            ckpt.backbone.config,
            config.backbone_config()
        );
    }
    let run = run_continual(&ckpt.backbone, &bench.sequence, &config.train_config())?;
    write_run(config, &ckpt, &run, out_dir)?;
    Ok(RunSummary {
        faa: run.matrix.faa()?,
        caa: run.matrix.caa()?,
    })
}

fn write_run(config: &ExperimentConfig, ckpt: &Checkpoint, run: &ContinualRun, out_dir: &Path) -> Result<()> {
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    write(&out_dir.join(CONFIG_FILE), config.to_toml())?;
    for (t, (snap, trace)) in run.snapshots.iter().zip(&run.traces).enumerate() {
        Checkpoint {
            backbone: ckpt.backbone.clone(),
            pool: snap.pool.clone(),
            head: Some(snap.head.clone()),
        }
        .save(&ckpt_dir.join(format!("task{t}.ckpt")))?;
        write(&out_dir.join(format!("loss_task{t}.csv")), trace_csv(trace))?;
    }
    write(&out_dir.join(MATRIX_FILE), run.matrix.to_csv())?;
    write(&out_dir.join(METRICS_FILE), metrics_csv(&run.matrix)?)?;
    write(&out_dir.join(FORGETTING_FILE), forgetting_csv(&run.matrix))?;
    Ok(())
}

/// Final FAA and CAA from a run directory's metrics file.
pub fn read_summary(run_dir: &Path) -> Result<RunSummary> {
    let path = run_dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let line = text
        .lines()
        .find(|l| l.starts_with("final,"))
        .with_context(|| format!("{} has no final line", path.display()))?;
    let fields: Vec<&str> = line.split(',').collect();
    ensure!(fields.len() == 3, "malformed final line in {}", path.display());
    Ok(RunSummary {
        faa: fields[1].parse()?,
        caa: fields[2].parse()?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: RunMode,
    pub runs: usize,
    pub faa_mean: f64,
    pub faa_std: f64,
    pub caa_mean: f64,
    pub caa_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups run directories by mode and aggregates their final metrics.
pub fn cmd_report(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    ensure!(!run_dirs.is_empty(), "no run directories given");
    let mut groups: BTreeMap<RunMode, Vec<RunSummary>> = BTreeMap::new();
    for dir in run_dirs {
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
        groups.entry(config.train.mode).or_default().push(read_summary(dir)?);
    }
    Ok(groups
        .into_iter()
        .map(|(mode, runs)| {
            let faa: Vec<f64> = runs.iter().map(|r| r.faa).collect();
            let caa: Vec<f64> = runs.iter().map(|r| r.caa).collect();
            let (faa_mean, faa_std) = mean_std(&faa);
            let (caa_mean, caa_std) = mean_std(&caa);
            ReportRow {
                mode,
                runs: runs.len(),
                faa_mean,
                faa_std,
                caa_mean,
                caa_std,
            }
        })
        .collect())
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("mode,runs,faa_mean,faa_std,caa_mean,caa_std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.mode, r.runs, r.faa_mean, r.faa_std, r.caa_mean, r.caa_std
        );
    }
    s
}

/// Percentages with `±` spreads, one row per mode.
pub fn report_table(rows: &[ReportRow]) -> String {
    let mut s = format!("{:<6} {:>4}  {:>16}  {:>16}\n", "mode", "runs", "FAA", "CAA");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<6} {:>4}  {:>7.2} ± {:<6.2}  {:>7.2} ± {:<6.2}",
            r.mode.name(),
            r.runs,
            100.0 * r.faa_mean,
            100.0 * r.faa_std,
            100.0 * r.caa_mean,
            100.0 * r.caa_std
        );
    }
    s
}

/// Runs the loss-weight grid and the pool-shape grid from the `[ablation]`
/// section. Each point gets its own run directory; `sweep.csv` collects the
/// final metrics.
pub fn cmd_sweep(config: &ExperimentConfig, data_dir: &Path, backbone: &Path, out_dir: &Path) -> Result<String> {
    fs::create_dir_all(out_dir)?;
    let mut s = String::from("grid,lambda_q,lambda_c,pool_size,prompt_len,faa,caa\n");
    let mut points = Vec::new();
    for &lq in &config.ablation.lambda_q {
        for &lc in &config.ablation.lambda_c {
            let mut c = config.clone();
            c.prompt.lambda_q = lq;
            c.prompt.lambda_c = lc;
            points.push(("weights", format!("lq{lq}_lc{lc}"), c));
        }
    }
    for &n in &config.ablation.pool_size {
        for &lp in &config.ablation.prompt_len {
            let mut c = config.clone();
            c.prompt.pool_size = n;
            c.prompt.prompt_len = lp;
            points.push(("pool", format!("n{n}_lp{lp}"), c));
        }
    }
    for (grid, name, c) in points {
        c.validate().with_context(|| format!("sweep point {name}"))?;
        let summary = cmd_run(&c, data_dir, backbone, &out_dir.join(&name))?;
        info!("{name}: faa {:.4} caa {:.4}", summary.faa, summary.caa);
        let p = &c.prompt;
        let _ = writeln!(
            s,
            "{grid},{},{},{},{},{:.6},{:.6}",
            p.lambda_q, p.lambda_c, p.pool_size, p.prompt_len, summary.faa, summary.caa
        );
    }
    write(&out_dir.join("sweep.csv"), &s)?;
    Ok(s)
}
