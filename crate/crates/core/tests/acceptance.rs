//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! `ECG_SSL_ACCEPTANCE_ONLY=5,10` restricts the run to some criteria.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ecg_ssl::data::{load_checkpoint, save_checkpoint, synth_ecg, ClassMorph, Dataset, SynthSpec};
use ecg_ssl::eval::{evaluate, evaluate_under_noise, noise_ladder_snr};
use ecg_ssl::models::{ConvConfig, CpcConfig, Objective};
use ecg_ssl::nn::gradcheck::{standard_suite, SUITE_TOL, SUITE_TOL_BN};
use ecg_ssl::nn::Tape;
use ecg_ssl::nn::Tensor;
use ecg_ssl::objectives::{byol_loss, info_nce_loss, nt_xent_loss, sample_cpc_targets};
use ecg_ssl::physio::NoiseLevel;
use ecg_ssl::rng::seeded;
use ecg_ssl::train::{
    finetune_two_step, linear_evaluate, pretrain, scratch_backbone, FinetuneConfig,
    LinearEvalConfig, ModelKind, RunConfig,
};
use ecg_ssl::transforms::TransformSpec;

// pinned tolerances
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const IDENTITY_TOL: f64 = 1e-6;
const BYOL_TOL: f64 = 1e-9;
const PROPERTY_BUDGET: Duration = Duration::from_secs(60);
const LADDER_SLACK_3_4_DB: f64 = 0.5;
const LADDER_SPREAD_DB: f64 = 5.0;
const PROBE_MARGIN: f64 = 0.10;
const SANITY_BUDGET: Duration = Duration::from_secs(15 * 60);
const AUC_INSTANCES: usize = 200;
const TTA_TOL: f64 = 1e-7;
const SEEDS: [u64; 3] = [0, 1, 2];

enum Verdict {
    Pass,
    Fail,
    /// Reported but not counted as a failure.
    Warn,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        verdict: Verdict::Pass,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        verdict: Verdict::Fail,
        detail: detail.into(),
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let cases = match standard_suite(0) {
        Ok(c) => c,
        Err(e) => return fail(e.to_string()),
    };
    let mut worst = Vec::new();
    let mut bad = Vec::new();
    for c in &cases {
        let tol = if c.name.contains("batchnorm") {
            SUITE_TOL_BN
        } else {
            SUITE_TOL
        };
        let err = c.report.max_rel_err();
        worst.push(format!("{}={err:.1e}", c.name));
        if err >= tol {
            bad.push(c.name);
        }
    }
    let elapsed = t.elapsed();
    check(
        bad.is_empty() && elapsed < GRAD_BUDGET && cases.len() == 10,
        format!(
            "{} cases in {elapsed:.1?}; failing {bad:?}; {}",
            cases.len(),
            worst.join(" ")
        ),
    )
}

fn loss_identities() -> Outcome {
    let mut tape = Tape::new();
    // uniform scores: every candidate has the same logit
    let (b, t, d, n) = (2, 8, 4, 128);
    let z = tape.constant(Tensor::zeros(&[b * t, d]));
    let preds: Vec<_> = (0..2)
        .map(|_| tape.constant(Tensor::zeros(&[b * t, d])))
        .collect();
    let targets = sample_cpc_targets(b, t, 2, n, 1.0, &mut seeded(0)).unwrap();
    let nce = info_nce_loss(&mut tape, z, &preds, &targets, true).unwrap();
    let nce = tape.value(nce).item();

    let same = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 0.3, -1.0, 2.0]).unwrap();
    let v1 = tape.constant(same.clone());
    let v2 = tape.constant(same);
    let nt = nt_xent_loss(&mut tape, v1, v2, 0.5).unwrap();
    let nt = tape.value(nt).item();

    let mut byol = |p: Vec<f64>, q: Vec<f64>| {
        let p = tape.constant(Tensor::new(&[1, 2], p).unwrap());
        let q = tape.constant(Tensor::new(&[1, 2], q).unwrap());
        let l = byol_loss(&mut tape, p, q).unwrap();
        tape.value(l).item()
    };
    let b0 = byol(vec![1.0, 2.0], vec![2.0, 4.0]);
    let b2 = byol(vec![1.0, 0.0], vec![0.0, 3.0]);
    let b4 = byol(vec![1.0, 2.0], vec![-1.0, -2.0]);

    let want_nce = ((n + 1) as f64).ln();
    let ok = (nce - want_nce).abs() < IDENTITY_TOL
        && (nt - 3f64.ln()).abs() < IDENTITY_TOL
        && b0.abs() < BYOL_TOL
        && (b2 - 2.0).abs() < BYOL_TOL
        && (b4 - 4.0).abs() < BYOL_TOL;
    check(
        ok,
        format!("InfoNCE {nce:.9} (ln 129 = {want_nce:.9}), NT-Xent {nt:.9}, BYOL {b0:.2e}/{b2:.12}/{b4:.12}"),
    )
}

fn transform_properties() -> Outcome {
    let t = Instant::now();
    let results = common::transform_properties();
    let elapsed = t.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    check(
        failed.is_empty() && elapsed < PROPERTY_BUDGET,
        format!(
            "{} properties x {} cases in {elapsed:.1?}; {}",
            results.len(),
            common::CASES,
            failed.join("; ")
        ),
    )
}

fn ladder_monotonicity() -> Outcome {
    let (ds, _) = synth_ecg(&SynthSpec {
        n_records: 64,
        n_channels: 12,
        duration_s: 10.0,
        fs: 100.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let snr = match noise_ladder_snr(&common::records(&ds), 0) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let v: Vec<f64> = snr.iter().map(|(_, s)| *s).collect();
    let mut ok = v.len() == 6;
    for i in 0..v.len().saturating_sub(1) {
        let slack = if i == 2 { LADDER_SLACK_3_4_DB } else { 0.0 };
        ok &= v[i + 1] <= v[i] + slack;
    }
    ok &= v[0] - v[5] >= LADDER_SPREAD_DB;
    let shown: Vec<String> = snr.iter().map(|(l, s)| format!("L{l}={s:.2}")).collect();
    check(ok, format!("mean SNR dB {}", shown.join(" ")))
}

/// Two classes that differ only in T-wave amplitude, with strong per-record
/// gain spread; raw random features separate them poorly.
fn sanity_corpus() -> Dataset {
    synth_ecg(&SynthSpec {
        n_records: 512,
        n_channels: 12,
        duration_s: 10.0,
        fs: 100.0,
        classes: vec![
            ClassMorph::default(),
            ClassMorph {
                name: "low_t".into(),
                t_scale: 0.5,
                ..ClassMorph::default()
            },
        ],
        gain_jitter: 0.5,
        noise_std: 0.05,
        seed: 2024,
        ..SynthSpec::default()
    })
    .unwrap()
    .0
}

fn toy_cpc(seed: u64) -> RunConfig {
    RunConfig {
        objective: Objective::Cpc,
        model: ModelKind::Cpc,
        cpc: CpcConfig {
            encoder_layers: 2,
            encoder_width: 64,
            lstm_layers: 1,
            lstm_hidden: 64,
            steps_ahead: 4,
            n_negatives: 16,
            ..CpcConfig::default()
        },
        pretrain_crop_s: Some(2.5),
        crop_s: 2.5,
        batch_size: 32,
        epochs: 12,
        linear_eval: LinearEvalConfig {
            epochs: 10,
            lr: 1e-2,
        },
        seed,
        ..RunConfig::default()
    }
}

fn representation_sanity(ds: &Dataset) -> Outcome {
    let t = Instant::now();
    let mut gains = Vec::new();
    let mut shown = Vec::new();
    for seed in SEEDS {
        let cfg = toy_cpc(seed);
        let run = || -> ecg_ssl::Result<(f64, f64)> {
            let pre = pretrain(&cfg, ds)?;
            let probe = linear_evaluate(&pre.checkpoint.model, ds, &cfg)?;
            let random = scratch_backbone(&cfg, 12, seed)?;
            let base = linear_evaluate(&random, ds, &cfg)?;
            Ok((
                probe.report.macro_auc.unwrap_or(f64::NAN),
                base.report.macro_auc.unwrap_or(f64::NAN),
            ))
        };
        match run() {
            Ok((p, r)) => {
                gains.push(p - r);
                shown.push(format!("seed {seed}: pretrained {p:.3} vs random {r:.3}"));
            }
            Err(e) => return fail(format!("seed {seed}: {e}")),
        }
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let elapsed = t.elapsed();
    check(
        mean >= PROBE_MARGIN && elapsed < SANITY_BUDGET,
        format!(
            "mean gain {mean:.3} (need {PROBE_MARGIN}); {}; {elapsed:.0?}",
            shown.join(", ")
        ),
    )
}

fn protocol_conformance() -> Outcome {
    match common::check_protocol_conformance() {
        Ok(()) => pass(
            "linear eval and finetune step 1 freeze the backbone; group rates lr, lr/10, lr/100",
        ),
        Err(e) => fail(e),
    }
}

fn auc_oracle() -> Outcome {
    match common::check_auc_oracle(AUC_INSTANCES, 42) {
        Ok(()) => pass(format!(
            "{AUC_INSTANCES} random instances match the pairwise oracle exactly"
        )),
        Err(e) => fail(e),
    }
}

fn tta_contract() -> Outcome {
    match common::tta_max_deviation(0) {
        Ok(dev) => check(
            dev < TTA_TOL,
            format!("max |tta - mean of 4 crops| = {dev:.2e}"),
        ),
        Err(e) => fail(e),
    }
}

fn determinism() -> Outcome {
    let ds = common::small_corpus(40, 9);
    let cfg = common::small_cpc_config();
    let run = || -> ecg_ssl::Result<(String, ecg_ssl::data::Checkpoint)> {
        let pre = pretrain(&cfg, &ds)?;
        let lin = linear_evaluate(&pre.checkpoint.model, &ds, &cfg)?;
        Ok((serde_json::to_string(&lin.report)?, pre.checkpoint))
    };
    let (a, b) = match (run(), run()) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return fail(e.to_string()),
    };
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    let round_trip = save_checkpoint(&p1, &a.1)
        .and_then(|_| load_checkpoint(&p1))
        .and_then(|back| {
            save_checkpoint(&p2, &back)?;
            Ok(back)
        });
    let back = match round_trip {
        Ok(b) => b,
        Err(e) => return fail(e.to_string()),
    };
    let same_bytes = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    let same_state = back.model.store == a.1.model.store && back.optimizer == a.1.optimizer;
    check(
        a.0 == b.0 && same_bytes && same_state,
        format!(
            "metrics identical: {}, checkpoint bytes identical: {same_bytes}, state identical: {same_state}",
            a.0 == b.0
        ),
    )
}

fn toy_simclr(seed: u64, transforms: Vec<TransformSpec>) -> RunConfig {
    RunConfig {
        objective: Objective::Simclr,
        model: ModelKind::Conv,
        conv: ConvConfig {
            depth_blocks: 2,
            base_channels: 16,
            projection_hidden: 64,
            projection_dim: 32,
            ..ConvConfig::default()
        },
        transforms,
        crop_s: 2.5,
        batch_size: 32,
        epochs: 10,
        finetune: FinetuneConfig {
            head_epochs: 10,
            full_epochs: 10,
            ..FinetuneConfig::default()
        },
        seed,
        ..RunConfig::default()
    }
}

fn noise_direction(ds: &Dataset) -> Outcome {
    let level6 = NoiseLevel::new(6).unwrap().params();
    let splits = ecg_ssl::data::split_dataset(ds, 8).unwrap();
    let test = ds.subset(&splits.test).unwrap();
    let views = [
        ("physio", vec![TransformSpec::by_name("physio").unwrap()]),
        (
            "rrc+to",
            vec![
                TransformSpec::by_name("rrc").unwrap(),
                TransformSpec::by_name("to").unwrap(),
            ],
        ),
    ];
    let mut drops = vec![Vec::new(), Vec::new()];
    let mut never_better = true;
    let mut shown = Vec::new();
    for seed in SEEDS {
        for (i, (name, t)) in views.iter().enumerate() {
            let cfg = toy_simclr(seed, t.clone());
            let run = || -> ecg_ssl::Result<(f64, f64)> {
                let pre = pretrain(&cfg, ds)?;
                let mut clf = finetune_two_step(&pre.checkpoint.model, ds, &cfg)?.model;
                let clean = evaluate(&mut clf, &test, cfg.crop_s)?.macro_auc;
                let noisy =
                    evaluate_under_noise(&mut clf, &test, &level6, "level=6", seed, cfg.crop_s)?;
                Ok((clean, noisy.auc.macro_auc))
            };
            match run() {
                Ok((clean, noisy)) => {
                    never_better &= noisy <= clean;
                    drops[i].push(clean - noisy);
                    shown.push(format!("{name}/{seed}: {clean:.3}->{noisy:.3}"));
                }
                Err(e) => return fail(format!("{name} seed {seed}: {e}")),
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (physio, rrcto) = (mean(&drops[0]), mean(&drops[1]));
    let detail = format!(
        "mean drop physio {physio:.3} vs rrc+to {rrcto:.3}; {}",
        shown.join(", ")
    );
    if !never_better {
        fail(format!("noise improved a model; {detail}"))
    } else if physio > rrcto {
        Outcome {
            verdict: Verdict::Warn,
            detail: format!("direction reversed; {detail}"),
        }
    } else {
        pass(detail)
    }
}

fn main() -> ExitCode {
    let only: Option<Vec<u8>> = std::env::var("ECG_SSL_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u8| only.as_ref().map_or(true, |o| o.contains(&id));
    let needs_corpus = wanted(5) || wanted(10);
    let corpus = needs_corpus.then(sanity_corpus);
    let criteria: Vec<(u8, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "gradient integrity", Box::new(gradient_integrity)),
        (2, "loss identities", Box::new(loss_identities)),
        (3, "transform properties", Box::new(transform_properties)),
        (
            4,
            "noise ladder monotonicity",
            Box::new(ladder_monotonicity),
        ),
        (
            5,
            "representation-learning sanity",
            Box::new(|| representation_sanity(corpus.as_ref().unwrap())),
        ),
        (6, "protocol conformance", Box::new(protocol_conformance)),
        (7, "AUC oracle equivalence", Box::new(auc_oracle)),
        (8, "TTA contract", Box::new(tta_contract)),
        (9, "determinism and persistence", Box::new(determinism)),
        (
            10,
            "noise-robustness direction",
            Box::new(|| noise_direction(corpus.as_ref().unwrap())),
        ),
    ];
    let mut failures = 0;
    for (id, name, f) in criteria {
        if !wanted(id) {
            continue;
        }
        let t = Instant::now();
        let out = f();
        let tag = match out.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failures += 1;
                "FAIL"
            }
            Verdict::Warn => "WARN",
        };
        println!(
            "{tag} criterion {id:>2} {name}: {} [{:.1?}]",
            out.detail,
            t.elapsed()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
