//! Experiment protocols: pretraining, linear evaluation, two-step
//! finetuning and the label-efficiency sweep.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{config_hash, split_dataset, Checkpoint, Dataset, RngState, Splits};
use crate::error::{Error, Result};
use crate::eval::{evaluate, stack_segments, AucReport};
use crate::models::{
    layer_group_lrs, Architecture, ConvConfig, CpcConfig, HeadVariant, Model, ModelSpec, Objective,
};
use crate::nn::layers::Ctx;
use crate::nn::{AdamW, AdamWConfig, BnMode, LayerGroup, ParamStore, Tensor};
use crate::objectives::{
    byol_symmetric_loss, info_nce_loss, nt_xent_loss, sample_cpc_targets, EmaState,
};
use crate::record::{random_crop, window_len, EcgRecord, Segment};
use crate::rng::{derive, record_stream, seeded};
use crate::transforms::{two_views, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cpc,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearEvalConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for LinearEvalConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Head-only epochs (step 1).
    pub head_epochs: usize,
    /// Whole-model epochs (step 2).
    pub full_epochs: usize,
    pub lr: f64,
    /// Skipping step 1 is the "no two-step" ablation.
    pub two_step: bool,
    /// Off gives every group the same rate.
    pub discriminative: bool,
    pub lr_factor: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            head_epochs: 50,
            full_epochs: 20,
            lr: 1e-3,
            two_step: true,
            discriminative: true,
            lr_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub objective: Objective,
    pub model: ModelKind,
    pub cpc: CpcConfig,
    pub conv: ConvConfig,
    /// View pipeline for SimCLR and BYOL.
    pub transforms: Vec<TransformSpec>,
    /// Pretraining crop length; defaults to 10 s for CPC and `crop_s` otherwise.
    pub pretrain_crop_s: Option<f64>,
    /// Crop length for downstream training and test-time augmentation.
    pub crop_s: f64,
    pub batch_size: usize,
    /// Pretraining epochs.
    pub epochs: usize,
    pub base_lr: f64,
    pub optimizer: AdamWConfig,
    pub temperature: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub train_folds: u8,
    pub head_variant: HeadVariant,
    pub linear_eval: LinearEvalConfig,
    pub finetune: FinetuneConfig,
    pub repeats: usize,
    /// Noise level applied to the test set by `noise-bench` (all levels if unset).
    pub noise_level: Option<u8>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Cpc,
            model: ModelKind::Cpc,
            cpc: CpcConfig::default(),
            conv: ConvConfig::default(),
            transforms: vec![
                TransformSpec::by_name("rrc").expect("known transform"),
                TransformSpec::by_name("to").expect("known transform"),
            ],
            pretrain_crop_s: None,
            crop_s: 2.5,
            batch_size: 32,
            epochs: 10,
            base_lr: 1e-3,
            optimizer: AdamWConfig::default(),
            temperature: crate::objectives::DEFAULT_TEMPERATURE,
            ema_decay: crate::objectives::DEFAULT_EMA_DECAY,
            seed: 0,
            train_folds: 8,
            head_variant: HeadVariant::Full,
            linear_eval: LinearEvalConfig::default(),
            finetune: FinetuneConfig::default(),
            repeats: 3,
            noise_level: None,
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(
            key,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(
            key,
            format!("must be finite and >= 0, got {v}"),
        ))
    }
}

impl RunConfig {
    pub fn from_json(v: serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v)
            .map_err(|e| Error::config(json_error_key(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        match (self.objective, self.model) {
            (Objective::Cpc, ModelKind::Conv) => {
                return Err(Error::config("objective", "cpc needs model = \"cpc\""))
            }
            (Objective::Simclr | Objective::Byol, ModelKind::Cpc) => {
                return Err(Error::config(
                    "objective",
                    "simclr and byol need model = \"conv\"",
                ));
            }
            _ => {}
        }
        for t in &self.transforms {
            t.validate()?;
        }
        if let Some(c) = self.pretrain_crop_s {
            positive("pretrain_crop_s", c)?;
        }
        positive("crop_s", self.crop_s)?;
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        for (k, v) in [
            ("epochs", self.epochs),
            ("linear_eval.epochs", self.linear_eval.epochs),
            ("repeats", self.repeats),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be at least 1"));
            }
        }
        if self.finetune.full_epochs == 0
            && !(self.finetune.two_step && self.finetune.head_epochs > 0)
        {
            return Err(Error::config(
                "finetune.full_epochs",
                "finetuning needs at least one epoch",
            ));
        }
        non_negative("base_lr", self.base_lr)?;
        non_negative("linear_eval.lr", self.linear_eval.lr)?;
        non_negative("finetune.lr", self.finetune.lr)?;
        positive("finetune.lr_factor", self.finetune.lr_factor)?;
        positive("temperature", self.temperature)?;
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", "must be in [0, 1]"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer", "betas must be in [0, 1)"));
        }
        positive("optimizer.eps", o.eps)?;
        non_negative("optimizer.weight_decay", o.weight_decay)?;
        if !(1..=8).contains(&self.train_folds) {
            return Err(Error::config("train_folds", "must be in 1..=8"));
        }
        if let Some(l) = self.noise_level {
            if !(1..=6).contains(&l) {
                return Err(Error::config("noise_level", "must be in 1..=6"));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        match self.model {
            ModelKind::Cpc => Architecture::Cpc(self.cpc.clone()),
            ModelKind::Conv => Architecture::Conv(self.conv.clone()),
        }
    }

    pub fn pretrain_crop(&self) -> f64 {
        match (self.pretrain_crop_s, self.objective) {
            (Some(c), _) => c,
            (None, Objective::Cpc) => 10.0,
            (None, _) => self.crop_s,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_json())
    }
}

/// Best-effort dotted key out of a serde error message.
fn json_error_key(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(i) = msg.find(marker) {
            let rest = &msg[i + marker.len()..];
            if let Some(j) = rest.find('`') {
                return rest[..j].to_string();
            }
        }
    }
    "config".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_auc: Option<f64>,
}

/// Written as `metrics.json` for every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seed: u64,
    pub macro_auc: Option<f64>,
    pub per_label_auc: Vec<Option<f64>>,
    pub curve: Vec<EpochLog>,
    pub selected_epoch: usize,
    /// Step-1 report of a two-step finetune.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step1: Option<Box<MetricsReport>>,
}

impl MetricsReport {
    fn from_auc(
        cfg: &RunConfig,
        auc: Option<&AucReport>,
        curve: Vec<EpochLog>,
        selected_epoch: usize,
    ) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            macro_auc: auc.map(|a| a.macro_auc),
            per_label_auc: auc.map(|a| a.per_label.clone()).unwrap_or_default(),
            curve,
            selected_epoch,
            step1: None,
        }
    }
}

fn split_records<'a>(
    ds: &'a Dataset,
    splits: &Splits,
) -> Result<(Vec<&'a EcgRecord>, Vec<&'a EcgRecord>, Vec<&'a EcgRecord>)> {
    Ok((
        ds.subset(&splits.train)?,
        ds.subset(&splits.val)?,
        ds.subset(&splits.test)?,
    ))
}

fn check_channels(model: &Model, ds: &Dataset) -> Result<()> {
    let want = model.spec().n_channels;
    match ds.records.iter().find(|r| r.n_channels() != want) {
        Some(r) => Err(Error::shape(
            "dataset",
            format!(
                "record `{}` has {} channels, model expects {want}",
                r.id,
                r.n_channels()
            ),
        )),
        None => Ok(()),
    }
}

/// Shuffled mini-batches; a trailing batch smaller than 2 is dropped.
fn batches<'a>(
    records: &[&'a EcgRecord],
    batch: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<&'a EcgRecord>> {
    let mut order: Vec<&EcgRecord> = records.to_vec();
    order.shuffle(&mut seeded(derive(seed, &format!("shuffle/{epoch}"))));
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn finite_loss(v: f64, epoch: usize, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            step,
            value: v,
        })
    }
}

/// Everything a pretraining step needs besides the batch.
struct Pretrainer<'c> {
    cfg: &'c RunConfig,
    model: Model,
    optimizer: AdamW,
    ema: Option<EmaState>,
}

/// Inputs of one pretraining step: one crop (CPC) or two views per record.
enum PretextBatch {
    Single(Tensor),
    Views(Tensor, Tensor),
}

impl<'c> Pretrainer<'c> {
    fn make_batch(&self, recs: &[&EcgRecord], seed: u64, epoch: u64) -> Result<PretextBatch> {
        let crop = self.cfg.pretrain_crop();
        let mut a = Vec::with_capacity(recs.len());
        let mut b = Vec::with_capacity(recs.len());
        for r in recs {
            let mut rng = record_stream(seed, &r.id, epoch);
            let seg = random_crop(r, crop, &mut rng)?;
            if self.cfg.objective == Objective::Cpc {
                a.push(seg);
            } else {
                let (v1, v2) = two_views(&seg, &self.cfg.transforms, &mut rng)?;
                a.push(v1);
                b.push(v2);
            }
        }
        let stack = |v: &[Segment]| stack_segments(&v.iter().collect::<Vec<_>>());
        Ok(if b.is_empty() {
            PretextBatch::Single(stack(&a)?)
        } else {
            PretextBatch::Views(stack(&a)?, stack(&b)?)
        })
    }

    /// Loss of one batch; with `train` the online model is updated.
    fn step(&mut self, batch: &PretextBatch, step_seed: u64, train: bool) -> Result<f64> {
        let mode = if train { BnMode::Train } else { BnMode::Eval };
        let Model { net, store } = &mut self.model;
        let mut ctx = Ctx::new(store, step_seed);
        let loss = match (self.cfg.objective, batch) {
            (Objective::Cpc, PretextBatch::Single(x)) => {
                let (b, t) = (x.shape()[0], x.shape()[2]);
                let (z, c) = net.cpc_forward(&mut ctx, x, mode)?;
                let d = ctx.tape.shape(z)[2];
                let h = ctx.tape.shape(c)[2];
                let z_flat = ctx.tape.reshape(z, &[b * t, d])?;
                let c_flat = ctx.tape.reshape(c, &[b * t, h])?;
                let preds = net.cpc_predictions(&mut ctx, c_flat)?;
                let cc = &self.cfg.cpc;
                let mut rng = seeded(derive(step_seed, "negatives"));
                let targets = sample_cpc_targets(
                    b,
                    t,
                    cc.steps_ahead,
                    cc.n_negatives,
                    cc.anchor_fraction,
                    &mut rng,
                )?;
                info_nce_loss(&mut ctx.tape, z_flat, &preds, &targets, cc.mean_over_steps)?
            }
            (Objective::Simclr, PretextBatch::Views(x1, x2)) => {
                let f1 = net.features(&mut ctx, x1, mode)?;
                let p1 = net.project(&mut ctx, f1, mode)?;
                let f2 = net.features(&mut ctx, x2, mode)?;
                let p2 = net.project(&mut ctx, f2, mode)?;
                nt_xent_loss(&mut ctx.tape, p1, p2, self.cfg.temperature)?
            }
            (Objective::Byol, PretextBatch::Views(x1, x2)) => {
                let ema = self.ema.as_mut().expect("byol keeps a target network");
                let (t1, t2) = {
                    let frozen = vec![false; ema.target.len()];
                    let mut tctx = Ctx::with_trainable(&mut ema.target, step_seed, frozen);
                    let f1 = net.features(&mut tctx, x1, mode)?;
                    let t1 = net.project(&mut tctx, f1, mode)?;
                    let f2 = net.features(&mut tctx, x2, mode)?;
                    let t2 = net.project(&mut tctx, f2, mode)?;
                    (tctx.tape.value(t1).clone(), tctx.tape.value(t2).clone())
                };
                let mut online = |x: &Tensor| -> Result<_> {
                    let f = net.features(&mut ctx, x, mode)?;
                    let p = net.project(&mut ctx, f, mode)?;
                    net.byol_predict(&mut ctx, p, mode)
                };
                let p1 = online(x1)?;
                let p2 = online(x2)?;
                let t1 = ctx.input(t1);
                let t2 = ctx.input(t2);
                byol_symmetric_loss(&mut ctx.tape, p1, t2, p2, t1)?
            }
            _ => unreachable!("batch kind follows the objective"),
        };
        let value = ctx.tape.value(loss).item();
        if train && value.is_finite() {
            let grads = ctx.backward(loss)?;
            drop(ctx);
            let lrs = vec![self.cfg.base_lr; self.model.store.len()];
            self.optimizer.step(&mut self.model.store, &grads, &lrs)?;
            if let Some(ema) = self.ema.as_mut() {
                ema.update(&self.model.store)?;
            }
        }
        Ok(value)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Runs the configured objective; keeps the epoch with the lowest
/// validation loss.
pub fn pretrain(cfg: &RunConfig, ds: &Dataset) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let spec = ModelSpec {
        architecture: cfg.architecture(),
        n_channels: ds
            .records
            .first()
            .ok_or_else(|| Error::Dataset("empty dataset".into()))?
            .n_channels(),
        objective: Some(cfg.objective),
        head: None,
    };
    pretrain_model(cfg, ds, Model::build(&spec, cfg.seed)?)
}

/// Pretraining from a given initialization.
pub fn pretrain_model(cfg: &RunConfig, ds: &Dataset, model: Model) -> Result<PretrainOutcome> {
    cfg.validate()?;
    check_channels(&model, ds)?;
    let splits = split_dataset(ds, cfg.train_folds)?;
    let (train, val, _) = split_records(ds, &splits)?;
    let fs = train[0].fs;
    if window_len(cfg.pretrain_crop(), fs)? < 1 {
        return Err(Error::config(
            "pretrain_crop_s",
            "crop shorter than one sample",
        ));
    }
    let optimizer = AdamW::new(cfg.optimizer, model.store.len());
    let ema = (cfg.objective == Objective::Byol)
        .then(|| EmaState::new(&model.store, cfg.ema_decay))
        .transpose()?;
    let mut pt = Pretrainer {
        cfg,
        model,
        optimizer,
        ema,
    };
    let crop_seed = derive(cfg.seed, "pretrain/crops");
    let val_seed = derive(cfg.seed, "pretrain/val");
    // validation batches are fixed across epochs
    let val_batches: Vec<PretextBatch> = val
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| pt.make_batch(c, val_seed, 0))
        .collect::<Result<_>>()?;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model, AdamW, Option<EmaState>)> = None;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut steps = 0;
        for (i, recs) in batches(&train, cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let batch = pt.make_batch(recs, crop_seed, epoch as u64)?;
            let loss = pt.step(
                &batch,
                derive(cfg.seed, &format!("pretrain/step/{epoch}/{i}")),
                true,
            )?;
            total += finite_loss(loss, epoch, i)?;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Dataset(
                "training split yields no batch of at least 2 records".into(),
            ));
        }
        let train_loss = total / steps as f64;
        let val_loss = if val_batches.is_empty() {
            train_loss
        } else {
            let mut v = 0.0;
            for (i, b) in val_batches.iter().enumerate() {
                v += pt.step(b, derive(val_seed, &format!("step/{i}")), false)?;
            }
            v / val_batches.len() as f64
        };
        info!("pretrain epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:.5}");
        curve.push(EpochLog {
            epoch,
            train_loss,
            val_loss: Some(val_loss),
            val_auc: None,
        });
        if best.as_ref().map_or(true, |b| val_loss < b.0) {
            best = Some((
                val_loss,
                epoch,
                pt.model.clone(),
                pt.optimizer.clone(),
                pt.ema.clone(),
            ));
        }
    }
    let (_, best_epoch, model, optimizer, ema) = best.expect("at least one epoch");
    let meta = serde_json::json!({ "curve": curve, "best_epoch": best_epoch });
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            model,
            optimizer: Some(optimizer),
            ema: ema.map(|e| (e.target, e.tau)),
            run_config: cfg.to_json(),
            rng: RngState {
                seed: cfg.seed,
                epoch: best_epoch as u64 + 1,
            },
            meta,
        },
        curve,
        best_epoch,
    })
}

/// Which parameters a supervised phase trains and how BN behaves.
#[derive(Debug, Clone, Copy)]
struct Phase {
    groups: &'static [LayerGroup],
    backbone_bn: BnMode,
    head_bn: BnMode,
    dropout: bool,
}

const LINEAR: Phase = Phase {
    groups: &[LayerGroup::Head],
    backbone_bn: BnMode::Eval,
    head_bn: BnMode::Eval,
    dropout: false,
};
const HEAD_ONLY: Phase = Phase {
    groups: &[LayerGroup::Head],
    backbone_bn: BnMode::StatsOnly,
    head_bn: BnMode::Train,
    dropout: true,
};
const FULL: Phase = Phase {
    groups: &[LayerGroup::Stem, LayerGroup::Body, LayerGroup::Head],
    backbone_bn: BnMode::Train,
    head_bn: BnMode::Train,
    dropout: true,
};

struct SupervisedRun {
    model: Model,
    curve: Vec<EpochLog>,
    best_epoch: usize,
    best_val: Option<f64>,
}

/// Trains with per-label binary cross-entropy, selecting the epoch with the
/// highest validation macro AUC.
#[allow(clippy::too_many_arguments)]
fn supervised(
    mut model: Model,
    train: &[&EcgRecord],
    val: &[&EcgRecord],
    cfg: &RunConfig,
    phase: Phase,
    epochs: usize,
    lrs: &[f64],
    tag: &str,
) -> Result<SupervisedRun> {
    let n_labels = model
        .n_labels()
        .ok_or_else(|| Error::invalid("supervised training needs a head"))?;
    let mask = model.store.mask_groups(phase.groups);
    let mut opt = AdamW::new(cfg.optimizer, model.store.len());
    let crop_seed = derive(cfg.seed, &format!("{tag}/crops"));
    let mut curve = Vec::with_capacity(epochs);
    let mut best: Option<(Option<f64>, usize, Model)> = None;
    for epoch in 0..epochs {
        let mut total = 0.0;
        let mut steps = 0;
        for (i, recs) in batches(train, cfg.batch_size, derive(cfg.seed, tag), epoch)
            .iter()
            .enumerate()
        {
            let segs = recs
                .iter()
                .map(|r| {
                    random_crop(
                        r,
                        cfg.crop_s,
                        &mut record_stream(crop_seed, &r.id, epoch as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let x = stack_segments(&segs.iter().collect::<Vec<_>>())?;
            let targets: Vec<f64> = recs.iter().flat_map(|r| r.multi_hot(n_labels)).collect();
            let Model { net, store } = &mut model;
            let mut ctx = Ctx::with_trainable(
                store,
                derive(cfg.seed, &format!("{tag}/step/{epoch}/{i}")),
                mask.clone(),
            );
            let logits = net.logits(
                &mut ctx,
                &x,
                phase.backbone_bn,
                phase.head_bn,
                phase.dropout,
            )?;
            let loss = ctx.tape.bce_with_logits(logits, &targets)?;
            let value = finite_loss(ctx.tape.value(loss).item(), epoch, i)?;
            let grads = ctx.backward(loss)?;
            drop(ctx);
            opt.step(&mut model.store, &grads, lrs)?;
            total += value;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Dataset(
                "training split yields no batch of at least 2 records".into(),
            ));
        }
        let val_auc = match evaluate(&mut model, val, cfg.crop_s) {
            Ok(a) => Some(a.macro_auc),
            Err(Error::InvalidArgument(_)) => None,
            Err(e) => return Err(e),
        };
        let train_loss = total / steps as f64;
        info!("{tag} epoch {epoch}: train loss {train_loss:.5}, val macro auc {val_auc:?}");
        curve.push(EpochLog {
            epoch,
            train_loss,
            val_loss: None,
            val_auc,
        });
        let better = match (&best, val_auc) {
            (None, _) => true,
            (Some((Some(b), _, _)), Some(v)) => v > *b,
            (Some((None, _, _)), Some(_)) => true,
            (Some(_), None) => false,
        };
        if better {
            best = Some((val_auc, epoch, model.clone()));
        }
    }
    let (best_val, best_epoch, model) = best.expect("at least one epoch");
    Ok(SupervisedRun {
        model,
        curve,
        best_epoch,
        best_val,
    })
}

fn with_head(backbone: &Model, n_labels: usize, variant: HeadVariant, seed: u64) -> Result<Model> {
    let mut model = backbone.clone();
    model.attach_classification_head(n_labels, variant, derive(seed, "downstream-head"))?;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub model: Model,
    pub report: MetricsReport,
}

/// Linear probe on frozen features: only a linear head is trained, every
/// BN uses its stored statistics.
pub fn linear_evaluate(backbone: &Model, ds: &Dataset, cfg: &RunConfig) -> Result<EvalOutcome> {
    cfg.validate()?;
    check_channels(backbone, ds)?;
    let splits = split_dataset(ds, cfg.train_folds)?;
    let (train, val, test) = split_records(ds, &splits)?;
    let model = with_head(backbone, ds.labels.len(), HeadVariant::Linear, cfg.seed)?;
    let lrs = model.lrs_per_param(|_| cfg.linear_eval.lr);
    let run = supervised(
        model,
        &train,
        &val,
        cfg,
        LINEAR,
        cfg.linear_eval.epochs,
        &lrs,
        "linear",
    )?;
    let mut model = run.model;
    let auc = evaluate(&mut model, &test, cfg.crop_s)?;
    let report = MetricsReport::from_auc(cfg, Some(&auc), run.curve, run.best_epoch);
    Ok(EvalOutcome { model, report })
}

/// Step 1 (optional): head only, backbone BN statistics still updated.
/// Step 2: the whole model with discriminative learning rates.
pub fn finetune_two_step(backbone: &Model, ds: &Dataset, cfg: &RunConfig) -> Result<EvalOutcome> {
    cfg.validate()?;
    check_channels(backbone, ds)?;
    let splits = split_dataset(ds, cfg.train_folds)?;
    let (train, val, test) = split_records(ds, &splits)?;
    let ft = &cfg.finetune;
    let mut model = with_head(backbone, ds.labels.len(), cfg.head_variant, cfg.seed)?;
    let mut step1 = None;
    let mut step2_base = ft.lr;
    if ft.two_step && ft.head_epochs > 0 {
        let lrs = model.lrs_per_param(|_| ft.lr);
        let run = supervised(
            model,
            &train,
            &val,
            cfg,
            HEAD_ONLY,
            ft.head_epochs,
            &lrs,
            "finetune/head",
        )?;
        model = run.model;
        let mut m = model.clone();
        let auc = evaluate(&mut m, &test, cfg.crop_s)?;
        info!(
            "finetune step 1: val macro auc {:?}, test macro auc {:.4}",
            run.best_val, auc.macro_auc
        );
        step1 = Some(Box::new(MetricsReport::from_auc(
            cfg,
            Some(&auc),
            run.curve,
            run.best_epoch,
        )));
        step2_base = ft.lr / 10.0;
    }
    if ft.full_epochs == 0 {
        let s1 = step1.expect("validated: some epochs run");
        return Ok(EvalOutcome { model, report: *s1 });
    }
    let factor = if ft.discriminative { ft.lr_factor } else { 1.0 };
    let group_lrs = layer_group_lrs(step2_base, factor)?;
    let lrs = model.lrs_per_param(|g| group_lrs.get(g));
    let run = supervised(
        model,
        &train,
        &val,
        cfg,
        FULL,
        ft.full_epochs,
        &lrs,
        "finetune/full",
    )?;
    let mut model = run.model;
    let auc = evaluate(&mut model, &test, cfg.crop_s)?;
    let mut report = MetricsReport::from_auc(cfg, Some(&auc), run.curve, run.best_epoch);
    report.step1 = step1;
    Ok(EvalOutcome { model, report })
}

/// A freshly initialized backbone for supervised-from-scratch baselines.
pub fn scratch_backbone(cfg: &RunConfig, n_channels: usize, seed: u64) -> Result<Model> {
    Model::build(
        &ModelSpec {
            architecture: cfg.architecture(),
            n_channels,
            objective: None,
            head: None,
        },
        derive(seed, "scratch"),
    )
}

/// Row of a sweep table (`sweep_key,seed,macro_auc,mean_snr_db`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_key: String,
    pub seed: u64,
    pub macro_auc: f64,
    pub mean_snr_db: Option<f64>,
}

pub const SWEEP_CSV_HEADER: &str = "sweep_key,seed,macro_auc,mean_snr_db";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let snr = r.mean_snr_db.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.sweep_key, r.seed, r.macro_auc, snr
        ));
    }
    out
}

/// Mean and sample standard deviation of the rows sharing a key.
pub fn summarize(rows: &[SweepRow]) -> Vec<(String, f64, f64)> {
    let mut keys: Vec<&str> = Vec::new();
    for r in rows {
        if !keys.contains(&r.sweep_key.as_str()) {
            keys.push(&r.sweep_key);
        }
    }
    keys.into_iter()
        .map(|k| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.sweep_key == k)
                .map(|r| r.macro_auc)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            } else {
                0.0
            };
            (k.to_string(), mean, var.sqrt())
        })
        .collect()
}

/// Finetunes the pretrained backbone and a scratch backbone on folds
/// `1..=c` for each count, over `cfg.repeats` seeds.
pub fn label_efficiency_sweep(
    pretrained: &Model,
    ds: &Dataset,
    cfg: &RunConfig,
    fold_counts: &[u8],
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &c in fold_counts {
        if !(1..=8).contains(&c) {
            return Err(Error::config(
                "folds",
                format!("fold count {c} outside 1..=8"),
            ));
        }
        for r in 0..cfg.repeats {
            let run_cfg = RunConfig {
                seed: cfg.seed + r as u64,
                train_folds: c,
                ..cfg.clone()
            };
            let pre = finetune_two_step(pretrained, ds, &run_cfg)?;
            let scratch = scratch_backbone(&run_cfg, pretrained.spec().n_channels, run_cfg.seed)?;
            let base = finetune_two_step(&scratch, ds, &run_cfg)?;
            for (kind, out) in [("pretrained", pre), ("scratch", base)] {
                rows.push(SweepRow {
                    sweep_key: format!("folds={c}/{kind}"),
                    seed: run_cfg.seed,
                    macro_auc: out.report.macro_auc.unwrap_or(f64::NAN),
                    mean_snr_db: None,
                });
            }
        }
    }
    Ok(rows)
}

/// Copies every tensor of `from` whose name exists in `to` with the same
/// shape; used to carry a backbone into a freshly built model.
pub fn copy_matching(from: &ParamStore, to: &mut ParamStore) -> usize {
    let mut n = 0;
    for e in from.entries() {
        if let Some(id) = to.find(&e.name) {
            if to.get(id).shape() == e.value.shape() {
                *to.get_mut(id) = e.value.clone();
                n += 1;
            }
        }
    }
    n
}
