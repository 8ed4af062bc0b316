//! `ecg-ssl`: pretraining, evaluation and benchmarking from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::Value;

use ecg_ssl::data::{
    load_checkpoint, load_checkpoint_for, load_dataset, save_checkpoint, split_dataset, synth_ecg,
    write_dataset, Checkpoint, Dataset, RngState, SynthSpec,
};
use ecg_ssl::eval::{evaluate, noise_robustness_sweep};
use ecg_ssl::models::Model;
use ecg_ssl::nn::gradcheck::standard_suite;
use ecg_ssl::physio::NoiseLevel;
use ecg_ssl::rng::record_stream;
use ecg_ssl::train::{
    finetune_two_step, label_efficiency_sweep, linear_evaluate, pretrain, scratch_backbone,
    summarize, sweep_csv, MetricsReport, RunConfig, SweepRow,
};
use ecg_ssl::transforms::TransformSpec;
use ecg_ssl::Error;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "ecg-ssl",
    version,
    about = "Self-supervised representation learning for ECG"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain a backbone with the configured objective.
    Pretrain(RunArgs),
    /// Fit a linear head on frozen features of a pretrained checkpoint.
    LinearEval(EvalArgs),
    /// Two-step finetuning of a checkpoint (or a scratch backbone).
    Finetune(FinetuneArgs),
    /// Test-set macro AUC of a finetuned classifier under physiological noise.
    NoiseBench(NoiseArgs),
    /// Finetune pretrained and scratch backbones on growing training folds.
    LabelSweep(SweepArgs),
    /// Write a record and one augmented view as CSV.
    AugmentPreview(PreviewArgs),
    /// Finite-difference gradient checks of every layer and loss.
    GradCheck(GradArgs),
    /// Generate a synthetic dataset directory.
    SynthData(SynthArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    data: PathBuf,
    /// Number of training folds (1..=8).
    #[arg(long)]
    folds: Option<u8>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pretrained checkpoint; omit together with --scratch for a supervised baseline.
    #[arg(long, required_unless_present = "scratch")]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "checkpoint")]
    scratch: bool,
}

#[derive(Args, Debug)]
struct NoiseArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Finetuned checkpoint with a classification head.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single noise level (1..=6); all levels when omitted.
    #[arg(long)]
    noise_level: Option<u8>,
    /// Noise draws per level.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated training fold counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    folds: Vec<u8>,
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Args, Debug)]
struct PreviewArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Record id; the first record when omitted.
    #[arg(long)]
    record: Option<String>,
    /// Transform short name (gn, gb, cr, rrc, to, dtw, physio).
    #[arg(long, default_value = "rrc")]
    transform: String,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum relative error for every case (batch norm cases get 10x).
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Writes gradcheck.json here when given.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON synthetic corpus spec; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    records: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config { .. })));
            ExitCode::from(if config { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::LinearEval(a) => cmd_linear_eval(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::NoiseBench(a) => cmd_noise_bench(a),
        Command::LabelSweep(a) => cmd_label_sweep(a),
        Command::AugmentPreview(a) => cmd_preview(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::SynthData(a) => cmd_synth(a),
    }
}

/// Recursive merge; objects merge key by key, anything else replaces.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config("config", format!("{}: {e}", path.display())).into())
}

/// Defaults, then the checkpoint's run config, then `--config`, then flags.
fn resolve_config(
    base: Option<&Value>,
    common: &Common,
    overrides: impl FnOnce(&mut serde_json::Map<String, Value>),
) -> anyhow::Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    if let Some(b) = base {
        merge(&mut v, b.clone());
    }
    if let Some(p) = &common.config {
        merge(&mut v, read_json(p)?);
    }
    let map = v.as_object_mut().expect("config is an object");
    if let Some(s) = common.seed {
        map.insert("seed".into(), s.into());
    }
    overrides(map);
    Ok(RunConfig::from_json(v)?)
}

fn prepare_out(dir: &Path, cfg: Option<&RunConfig>) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    if let Some(cfg) = cfg {
        write_json(&dir.join("config.json"), &cfg.to_json())?;
    }
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_data(dir: &Path) -> anyhow::Result<Dataset> {
    Ok(load_dataset(dir)?.load_all()?)
}

fn folds_override(folds: Option<u8>) -> impl FnOnce(&mut serde_json::Map<String, Value>) {
    move |m| {
        if let Some(f) = folds {
            m.insert("train_folds".into(), f.into());
        }
    }
}

fn classifier_checkpoint(
    model: Model,
    cfg: &RunConfig,
    report: &MetricsReport,
) -> anyhow::Result<Checkpoint> {
    Ok(Checkpoint {
        model,
        optimizer: None,
        ema: None,
        run_config: cfg.to_json(),
        rng: RngState {
            seed: cfg.seed,
            epoch: report.selected_epoch as u64 + 1,
        },
        meta: serde_json::to_value(report)?,
    })
}

fn cmd_pretrain(a: RunArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(None, &a.common, folds_override(a.folds))?;
    prepare_out(&a.common.out, Some(&cfg))?;
    let ds = load_data(&a.data)?;
    let out = pretrain(&cfg, &ds)?;
    save_checkpoint(&a.common.out.join("model.ckpt"), &out.checkpoint)?;
    let best = out.curve[out.best_epoch].val_loss;
    write_json(
        &a.common.out.join("metrics.json"),
        &serde_json::json!({
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "best_val_loss": best,
            "selected_epoch": out.best_epoch,
            "curve": out.curve,
        }),
    )?;
    info!(
        "pretraining done; best epoch {} (val loss {:?})",
        out.best_epoch, best
    );
    Ok(())
}

fn cmd_linear_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cfg = resolve_config(
        Some(&ck.run_config),
        &a.run.common,
        folds_override(a.run.folds),
    )?;
    let ck = load_checkpoint_for(&a.checkpoint, cfg.architecture().kind())?;
    prepare_out(&a.run.common.out, Some(&cfg))?;
    let ds = load_data(&a.run.data)?;
    let out = linear_evaluate(&ck.model, &ds, &cfg)?;
    write_json(&a.run.common.out.join("metrics.json"), &out.report)?;
    info!(
        "linear evaluation test macro AUC {:?}",
        out.report.macro_auc
    );
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let base = match &a.checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let cfg = resolve_config(
        base.as_ref().map(|c| &c.run_config),
        &a.run.common,
        folds_override(a.run.folds),
    )?;
    prepare_out(&a.run.common.out, Some(&cfg))?;
    let ds = load_data(&a.run.data)?;
    let backbone = match (&a.checkpoint, a.scratch) {
        (Some(p), _) => load_checkpoint_for(p, cfg.architecture().kind())?.model,
        (None, true) => {
            let n_ch = ds
                .records
                .first()
                .map(|r| r.n_channels())
                .context("empty dataset")?;
            scratch_backbone(&cfg, n_ch, cfg.seed)?
        }
        (None, false) => bail!("need --checkpoint or --scratch"),
    };
    let out = finetune_two_step(&backbone, &ds, &cfg)?;
    write_json(&a.run.common.out.join("metrics.json"), &out.report)?;
    save_checkpoint(
        &a.run.common.out.join("model.ckpt"),
        &classifier_checkpoint(out.model, &cfg, &out.report)?,
    )?;
    info!("finetuning test macro AUC {:?}", out.report.macro_auc);
    Ok(())
}

fn cmd_noise_bench(a: NoiseArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let level = a.noise_level;
    let repeats = a.repeats;
    let cfg = resolve_config(Some(&ck.run_config), &a.run.common, |m| {
        folds_override(a.run.folds)(m);
        if let Some(l) = level {
            m.insert("noise_level".into(), l.into());
        }
        if let Some(r) = repeats {
            m.insert("repeats".into(), r.into());
        }
    })?;
    let mut model = ck.model;
    if model.n_labels().is_none() {
        bail!(
            "{} has no classification head; finetune it first",
            a.checkpoint.display()
        );
    }
    prepare_out(&a.run.common.out, Some(&cfg))?;
    let ds = load_data(&a.run.data)?;
    let splits = split_dataset(&ds, cfg.train_folds)?;
    let test = ds.subset(&splits.test)?;
    let levels = match cfg.noise_level {
        Some(l) => vec![NoiseLevel::new(l)?],
        None => NoiseLevel::all(),
    };
    let clean = evaluate(&mut model, &test, cfg.crop_s)?;
    let mut rows = vec![SweepRow {
        sweep_key: "clean".into(),
        seed: cfg.seed,
        macro_auc: clean.macro_auc,
        mean_snr_db: None,
    }];
    for r in 0..cfg.repeats {
        let seed = cfg.seed + r as u64;
        for e in noise_robustness_sweep(&mut model, &test, &levels, seed, cfg.crop_s)? {
            info!(
                "{} seed {seed}: macro AUC {:.4}, mean SNR {:?} dB",
                e.key, e.auc.macro_auc, e.mean_snr_db
            );
            rows.push(SweepRow {
                sweep_key: e.key,
                seed,
                macro_auc: e.auc.macro_auc,
                mean_snr_db: e.mean_snr_db,
            });
        }
    }
    fs::write(a.run.common.out.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(())
}

fn cmd_label_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let repeats = a.repeats;
    let cfg = resolve_config(Some(&ck.run_config), &a.common, |m| {
        if let Some(r) = repeats {
            m.insert("repeats".into(), r.into());
        }
    })?;
    if let Some(bad) = a.folds.iter().find(|f| !(1..=8).contains(*f)) {
        return Err(Error::config("folds", format!("fold count {bad} outside 1..=8")).into());
    }
    prepare_out(&a.common.out, Some(&cfg))?;
    let ds = load_data(&a.data)?;
    let rows = label_efficiency_sweep(&ck.model, &ds, &cfg, &a.folds)?;
    fs::write(a.common.out.join("sweep.csv"), sweep_csv(&rows))?;
    for (key, mean, std) in summarize(&rows) {
        info!("{key}: macro AUC {mean:.4} +/- {std:.4}");
    }
    Ok(())
}

fn cmd_preview(a: PreviewArgs) -> anyhow::Result<()> {
    let t = TransformSpec::by_name(&a.transform)?;
    let dir = load_dataset(&a.data)?;
    let id = match a.record {
        Some(id) => id,
        None => dir
            .manifest
            .records
            .first()
            .context("empty dataset")?
            .id
            .clone(),
    };
    let record = dir.load_record(&id)?;
    let seed = a.common.seed.unwrap_or(0);
    let view = t.apply(&record.as_segment(), &mut record_stream(seed, &id, 0))?;
    fs::create_dir_all(&a.common.out)?;
    let mut csv = String::from("t_s,channel,original,augmented\n");
    for c in 0..record.n_channels() {
        for i in 0..record.n_timesteps() {
            csv.push_str(&format!(
                "{},{c},{},{}\n",
                i as f64 / record.fs,
                record.samples.get(c, i),
                view.samples.get(c, i)
            ));
        }
    }
    let path = a
        .common
        .out
        .join(format!("preview_{}_{}.csv", id, t.short_name()));
    fs::write(&path, csv)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn cmd_grad_check(a: GradArgs) -> anyhow::Result<()> {
    if !(a.tolerance > 0.0) {
        return Err(Error::config("tolerance", "must be positive").into());
    }
    let cases = standard_suite(a.seed.unwrap_or(0))?;
    let mut failed = Vec::new();
    let mut rows = Vec::new();
    for c in &cases {
        let tol = if c.name.contains("batchnorm") {
            a.tolerance * 10.0
        } else {
            a.tolerance
        };
        let err = c.report.max_rel_err();
        let ok = err < tol;
        println!(
            "{} {:<22} max rel err {err:.3e} (tol {tol:.0e})",
            if ok { "PASS" } else { "FAIL" },
            c.name
        );
        rows.push(
            serde_json::json!({ "case": c.name, "max_rel_err": err, "tolerance": tol, "pass": ok }),
        );
        if !ok {
            failed.push(c.name);
        }
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("gradcheck.json"), &rows)?;
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {failed:?}");
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut v = serde_json::to_value(SynthSpec::default())?;
    if let Some(p) = &a.config {
        merge(&mut v, read_json(p)?);
    }
    let map = v.as_object_mut().expect("spec is an object");
    if let Some(s) = a.seed {
        map.insert("seed".into(), s.into());
    }
    if let Some(n) = a.records {
        map.insert("n_records".into(), n.into());
    }
    let spec: SynthSpec =
        serde_json::from_value(v).map_err(|e| Error::config("synth", e.to_string()))?;
    let (ds, _) = synth_ecg(&spec)?;
    write_dataset(&a.out, &ds)?;
    write_json(&a.out.join("synth_spec.json"), &spec)?;
    info!("wrote {} records to {}", ds.records.len(), a.out.display());
    Ok(())
}
