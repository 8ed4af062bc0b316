//! Checks shared by the integration tests and the acceptance harness. Each
//! returns `Err(description)` on the first violation.
#![allow(dead_code)]

use ecg_ssl::data::{synth_ecg, Dataset, SynthSpec};
use ecg_ssl::eval::{binary_auc, macro_auc, predict_segments, predict_tta};
use ecg_ssl::models::{Architecture, CpcConfig, HeadVariant, Model, ModelSpec};
use ecg_ssl::nn::{LayerGroup, ParamKind, ParamStore};
use ecg_ssl::physio::{apply_physio_noise, NoiseLevel, PhysioParams};
use ecg_ssl::record::{nonoverlapping_crops, EcgRecord, Segment, Waveform};
use ecg_ssl::rng::seeded;
use ecg_ssl::transforms::TransformSpec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Randomized cases per property.
pub const CASES: u32 = 128;

pub fn runner() -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases: CASES,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn run<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner()
        .run(&strategy, test)
        .map_err(|e| format!("{name}: {e}"))
}

pub fn segment(n_ch: usize, n_t: usize, seed: u64) -> Segment {
    let mut rng = seeded(seed);
    let data = (0..n_ch * n_t)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect::<Vec<f64>>();
    Segment {
        samples: Waveform::new(n_ch, n_t, data).unwrap(),
        fs: 100.0,
        source_id: "prop".into(),
        source_offset: 0,
        padded: false,
    }
}

fn segments() -> impl Strategy<Value = Segment> {
    (1usize..=4, 2usize..=200, any::<u64>()).prop_map(|(c, t, s)| segment(c, t, s))
}

fn physio_params() -> impl Strategy<Value = PhysioParams> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..2.0f64)
        .prop_map(|(a, b, c, d)| PhysioParams::with_amplitudes(a, b, c, d))
}

fn transforms() -> impl Strategy<Value = TransformSpec> {
    prop_oneof![
        (0.0..0.5f64).prop_map(|sigma| TransformSpec::GaussianNoise { sigma }),
        Just(TransformSpec::by_name("gb").unwrap()),
        (1.0..5.0f64).prop_map(|base| TransformSpec::ChannelResize { base }),
        (0.05..=1.0f64, 0.0..=1.0f64).prop_map(|(min, u)| TransformSpec::RandomResizedCrop {
            min,
            max: min + u * (1.0 - min),
        }),
        (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(min, u)| TransformSpec::TimeOut {
            min,
            max: min + u * (1.0 - min),
        }),
        (0usize..5, 1usize..20)
            .prop_map(|(warps, radius)| TransformSpec::DynamicTimeWarp { warps, radius }),
        physio_params().prop_map(TransformSpec::PhysioNoise),
    ]
}

pub fn prop_shape_preservation() -> Result<(), String> {
    run(
        "shape",
        (segments(), transforms(), any::<u64>()),
        |(seg, t, s)| {
            let out = t
                .apply(&seg, &mut seeded(s))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(out.samples.shape(), seg.samples.shape(), "{:?}", t);
            prop_assert!(out.samples.is_finite());
            prop_assert_eq!(out.fs, seg.fs);
            Ok(())
        },
    )
}

pub fn prop_determinism() -> Result<(), String> {
    run(
        "determinism",
        (segments(), transforms(), any::<u64>()),
        |(seg, t, s)| {
            let a = t.apply(&seg, &mut seeded(s)).unwrap();
            let b = t.apply(&seg, &mut seeded(s)).unwrap();
            prop_assert_eq!(a, b, "{:?}", t);
            Ok(())
        },
    )
}

pub fn prop_zero_parameter_identity() -> Result<(), String> {
    let identities = [
        TransformSpec::GaussianNoise { sigma: 0.0 },
        TransformSpec::GaussianBlur { kernel: vec![1.0] },
        TransformSpec::ChannelResize { base: 1.0 },
        TransformSpec::RandomResizedCrop { min: 1.0, max: 1.0 },
        TransformSpec::TimeOut { min: 0.0, max: 0.0 },
        TransformSpec::DynamicTimeWarp {
            warps: 0,
            radius: 5,
        },
        TransformSpec::PhysioNoise(PhysioParams::silent()),
    ];
    run(
        "identity",
        (segments(), 0..identities.len(), any::<u64>()),
        |(seg, i, s)| {
            let out = identities[i].apply(&seg, &mut seeded(s)).unwrap();
            prop_assert_eq!(&out.samples, &seg.samples, "{:?}", identities[i]);
            Ok(())
        },
    )
}

pub fn prop_time_out_bounds() -> Result<(), String> {
    let cases = (segments(), 0.0..=1.0f64, 0.0..=1.0f64, any::<u64>());
    run("time_out", cases, |(seg, min, u, s)| {
        let max = min + u * (1.0 - min);
        let out = TransformSpec::TimeOut { min, max }
            .apply(&seg, &mut seeded(s))
            .unwrap();
        let n = seg.len();
        // inputs are Gaussian, so only timed-out columns are zero
        let zero: Vec<bool> = (0..n)
            .map(|t| (0..seg.n_channels()).all(|c| out.samples.get(c, t) == 0.0))
            .collect();
        let span = zero.iter().filter(|z| **z).count();
        let lo = (min * n as f64).round() as usize;
        let hi = (max * n as f64).round() as usize;
        prop_assert!(
            lo <= span && span <= hi,
            "span {} outside [{}, {}] of {}",
            span,
            lo,
            hi,
            n
        );
        if span > 0 {
            let first = zero.iter().position(|z| *z).unwrap();
            prop_assert!(
                zero[first..first + span].iter().all(|z| *z),
                "zeroed span not contiguous"
            );
        }
        for t in (0..n).filter(|&t| !zero[t]) {
            for c in 0..seg.n_channels() {
                prop_assert_eq!(out.samples.get(c, t), seg.samples.get(c, t));
            }
        }
        Ok(())
    })
}

pub fn prop_channel_resize_ratio() -> Result<(), String> {
    run(
        "channel_resize",
        (segments(), 1.0..6.0f64, any::<u64>()),
        |(seg, base, s)| {
            let out = TransformSpec::ChannelResize { base }
                .apply(&seg, &mut seeded(s))
                .unwrap();
            for c in 0..seg.n_channels() {
                let ratio = out.samples.get(c, 0) / seg.samples.get(c, 0);
                prop_assert!(
                    ratio >= 1.0 / base * (1.0 - 1e-12) && ratio <= base * (1.0 + 1e-12),
                    "ratio {} base {}",
                    ratio,
                    base
                );
                for t in 0..seg.len() {
                    let want = seg.samples.get(c, t) * ratio;
                    prop_assert!(
                        (out.samples.get(c, t) - want).abs() <= 1e-12 * want.abs().max(1.0)
                    );
                }
            }
            Ok(())
        },
    )
}

pub fn prop_blur_constant_invariance() -> Result<(), String> {
    run(
        "blur",
        (1usize..=4, 1usize..=200, -10.0..10.0f64),
        |(c, t, v)| {
            let mut seg = segment(c, t, 0);
            seg.samples.data_mut().fill(v);
            let out = TransformSpec::by_name("gb")
                .unwrap()
                .apply(&seg, &mut seeded(0))
                .unwrap();
            for x in out.samples.data() {
                prop_assert!((x - v).abs() <= 1e-12 * v.abs().max(1.0), "{} vs {}", x, v);
            }
            Ok(())
        },
    )
}

pub fn prop_additive_superposition() -> Result<(), String> {
    let cases = (segments(), physio_params(), 0usize..=6, any::<u64>());
    run("superposition", cases, |(seg, params, level, s)| {
        let params = if level == 0 {
            params
        } else {
            NoiseLevel::new(level as u8).unwrap().params()
        };
        let out = apply_physio_noise(&seg, &params, &mut seeded(s)).unwrap();
        let total = out.components.total();
        let c = &out.components;
        for i in 0..seg.samples.data().len() {
            let sum = c.baseline_wander.data()[i]
                + c.powerline.data()[i]
                + c.emg.data()[i]
                + c.baseline_shift.data()[i];
            prop_assert_eq!(total.data()[i], sum);
            prop_assert_eq!(out.segment.samples.data()[i], seg.samples.data()[i] + sum);
            let n = out.noise.data()[i];
            prop_assert!(
                (n - sum).abs() <= 1e-12 * (1.0 + seg.samples.data()[i].abs() + sum.abs())
            );
        }
        Ok(())
    })
}

/// Every transform property, by name.
pub fn transform_properties() -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("shape preservation", prop_shape_preservation()),
        ("determinism", prop_determinism()),
        ("zero-parameter identity", prop_zero_parameter_identity()),
        ("time_out zero fraction", prop_time_out_bounds()),
        ("channel_resize ratio", prop_channel_resize_ratio()),
        ("blur constant invariance", prop_blur_constant_invariance()),
        ("additive superposition", prop_additive_superposition()),
    ]
}

/// All positive/negative pairs, counted directly.
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi && !yj {
                pairs += 1;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

/// Random multi-label instances compared with the pairwise oracle, plus
/// monotone-transform and permutation invariance.
pub fn check_auc_oracle(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = seeded(seed);
    let mut checked = 0;
    for k in 0..instances {
        let n = rng.gen_range(2..=50);
        let l = rng.gen_range(1..=5);
        // coarse scores so ties are common
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..l)
                    .map(|_| (rng.gen_range(0..12) as f64) / 4.0)
                    .collect()
            })
            .collect();
        let labels: Vec<Vec<bool>> = (0..n)
            .map(|_| (0..l).map(|_| rng.gen_bool(0.4)).collect())
            .collect();
        let oracle: Vec<Option<f64>> = (0..l)
            .map(|j| {
                let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
                let y: Vec<bool> = labels.iter().map(|r| r[j]).collect();
                brute_force_auc(&s, &y)
            })
            .collect();
        let defined: Vec<f64> = oracle.iter().flatten().copied().collect();
        let got = macro_auc(&scores, &labels);
        if defined.is_empty() {
            if got.is_ok() {
                return Err(format!(
                    "instance {k}: expected an error with no defined label"
                ));
            }
            continue;
        }
        let got = got.map_err(|e| format!("instance {k}: {e}"))?;
        if got.per_label != oracle {
            return Err(format!(
                "instance {k}: per-label {:?} vs oracle {:?}",
                got.per_label, oracle
            ));
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        if got.macro_auc != mean {
            return Err(format!(
                "instance {k}: macro {} vs oracle {}",
                got.macro_auc, mean
            ));
        }
        // strictly increasing map preserves order and ties
        let mapped: Vec<Vec<f64>> = scores
            .iter()
            .map(|r| r.iter().map(|v| (v * 3.0).exp() - 7.0).collect())
            .collect();
        if macro_auc(&mapped, &labels).unwrap() != got {
            return Err(format!(
                "instance {k}: not invariant under a monotone transform"
            ));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let ps: Vec<Vec<f64>> = perm.iter().map(|&i| scores[i].clone()).collect();
        let pl: Vec<Vec<bool>> = perm.iter().map(|&i| labels[i].clone()).collect();
        if macro_auc(&ps, &pl).unwrap() != got {
            return Err(format!("instance {k}: not invariant under permutation"));
        }
        for j in 0..l {
            let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
            let y: Vec<bool> = labels.iter().map(|r| r[j]).collect();
            if binary_auc(&s, &y).unwrap() != oracle[j] {
                return Err(format!("instance {k}: binary auc of label {j} differs"));
            }
        }
        checked += 1;
    }
    if checked * 2 < instances {
        return Err(format!(
            "only {checked} of {instances} instances had a defined label"
        ));
    }
    Ok(())
}

/// A small CPC classifier for contract checks on TTA.
pub fn tiny_classifier(n_channels: usize, n_labels: usize, seed: u64) -> Model {
    let spec = ModelSpec {
        architecture: Architecture::Cpc(CpcConfig {
            encoder_layers: 1,
            encoder_width: 8,
            lstm_layers: 1,
            lstm_hidden: 8,
            steps_ahead: 2,
            n_negatives: 4,
            ..CpcConfig::default()
        }),
        n_channels,
        objective: None,
        head: None,
    };
    let mut m = Model::build(&spec, seed).unwrap();
    m.attach_classification_head(n_labels, HeadVariant::Full, seed + 1)
        .unwrap();
    m
}

/// Largest deviation between `predict_tta` on a 10 s record and the mean of
/// its four 2.5 s crop predictions.
pub fn tta_max_deviation(seed: u64) -> Result<f64, String> {
    let (ds, _) = synth_ecg(&SynthSpec {
        n_records: 3,
        n_channels: 4,
        duration_s: 10.0,
        fs: 100.0,
        seed,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let mut model = tiny_classifier(4, 2, seed);
    let mut worst = 0.0f64;
    for r in &ds.records {
        let crops = nonoverlapping_crops(r, 2.5).map_err(|e| e.to_string())?;
        if crops.len() != 4 {
            return Err(format!("expected 4 crops, got {}", crops.len()));
        }
        let refs: Vec<&Segment> = crops.iter().collect();
        let per_crop = predict_segments(&mut model, &refs).map_err(|e| e.to_string())?;
        let tta = predict_tta(&mut model, &[r], 2.5).map_err(|e| e.to_string())?;
        for l in 0..2 {
            let mean = per_crop.iter().map(|p| p[l]).sum::<f64>() / 4.0;
            worst = worst.max((tta[0][l] - mean).abs());
        }
    }
    Ok(worst)
}

/// Names of entries whose values differ bitwise between two stores, keeping
/// only those matching `filter`.
pub fn changed(
    before: &ParamStore,
    after: &ParamStore,
    filter: impl Fn(LayerGroup, ParamKind) -> bool,
) -> Vec<String> {
    before
        .entries()
        .iter()
        .filter(|e| filter(e.group, e.kind))
        .filter(|e| match after.find(&e.name) {
            Some(id) => {
                let a = after.get(id).data();
                let b = e.value.data();
                a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits())
            }
            None => true,
        })
        .map(|e| e.name.clone())
        .collect()
}

pub fn records(ds: &Dataset) -> Vec<&EcgRecord> {
    ds.records.iter().collect()
}

pub fn small_corpus(n: usize, seed: u64) -> Dataset {
    synth_ecg(&SynthSpec {
        n_records: n,
        n_channels: 3,
        duration_s: 4.0,
        fs: 25.0,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
    .0
}

pub fn small_cpc_config() -> ecg_ssl::train::RunConfig {
    use ecg_ssl::train::{FinetuneConfig, LinearEvalConfig, RunConfig};
    RunConfig {
        cpc: CpcConfig {
            encoder_layers: 1,
            encoder_width: 8,
            lstm_layers: 1,
            lstm_hidden: 8,
            steps_ahead: 2,
            n_negatives: 4,
            ..CpcConfig::default()
        },
        pretrain_crop_s: Some(2.0),
        crop_s: 2.0,
        batch_size: 8,
        epochs: 2,
        linear_eval: LinearEvalConfig {
            epochs: 2,
            lr: 1e-2,
        },
        finetune: FinetuneConfig {
            head_epochs: 2,
            full_epochs: 1,
            ..FinetuneConfig::default()
        },
        repeats: 1,
        ..RunConfig::default()
    }
}

/// Frozen parts stay bit-identical under linear evaluation and step 1 of
/// finetuning; group learning rates follow the factor-10 rule.
pub fn check_protocol_conformance() -> Result<(), String> {
    use ecg_ssl::models::layer_group_lrs;
    use ecg_ssl::train::{finetune_two_step, linear_evaluate, pretrain, FinetuneConfig, RunConfig};

    let ds = small_corpus(40, 11);
    let cfg = small_cpc_config();
    let backbone = pretrain(&cfg, &ds)
        .map_err(|e| e.to_string())?
        .checkpoint
        .model;

    let lin = linear_evaluate(&backbone, &ds, &cfg).map_err(|e| e.to_string())?;
    let moved = changed(&backbone.store, &lin.model.store, |g, _| {
        g != LayerGroup::Head
    });
    if !moved.is_empty() {
        return Err(format!(
            "linear evaluation changed frozen entries {moved:?}"
        ));
    }
    if lin.model.param_count(&[LayerGroup::Head]) == 0 {
        return Err("linear evaluation built no head".into());
    }

    let step1_only = RunConfig {
        finetune: FinetuneConfig {
            two_step: true,
            head_epochs: 2,
            full_epochs: 0,
            ..cfg.finetune.clone()
        },
        ..cfg.clone()
    };
    let ft = finetune_two_step(&backbone, &ds, &step1_only).map_err(|e| e.to_string())?;
    let moved = changed(&backbone.store, &ft.model.store, |g, k| {
        g != LayerGroup::Head && k == ParamKind::Weight
    });
    if !moved.is_empty() {
        return Err(format!(
            "finetune step 1 changed backbone weights {moved:?}"
        ));
    }
    let stats = changed(&backbone.store, &ft.model.store, |g, k| {
        g != LayerGroup::Head && k == ParamKind::Buffer
    });
    if stats.is_empty() {
        return Err("finetune step 1 left the backbone BN statistics untouched".into());
    }
    // the step-1 head has to move away from its initialization
    let mut fresh = backbone.clone();
    fresh
        .attach_classification_head(
            ds.labels.len(),
            cfg.head_variant,
            ecg_ssl::rng::derive(cfg.seed, "downstream-head"),
        )
        .map_err(|e| e.to_string())?;
    let head = changed(&fresh.store, &ft.model.store, |g, k| {
        g == LayerGroup::Head && k == ParamKind::Weight
    });
    if head.is_empty() {
        return Err("finetune step 1 did not train the head".into());
    }

    for lr in [1e-3, 3e-4, 0.01] {
        let g = layer_group_lrs(lr, 10.0).map_err(|e| e.to_string())?;
        if g.get(LayerGroup::Head) != lr
            || g.get(LayerGroup::Body) != lr / 10.0
            || g.get(LayerGroup::Stem) != lr / 100.0
        {
            return Err(format!("group rates for {lr}: {g:?}"));
        }
    }
    Ok(())
}
