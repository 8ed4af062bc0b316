//! Architectures assembled from the nn substrate, and their layer groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    concat_pool, dropout, Activation, BatchNorm, BnMode, ConvResidualBlock, Ctx, Dense, Lstm,
};
use crate::nn::{Conv1d, LayerGroup, ParamStore, Tensor, Var};
use crate::rng::{derive, seeded};

pub const HEAD_HIDDEN: usize = 512;
pub const HEAD_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpcConfig {
    pub encoder_layers: usize,
    pub encoder_width: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub steps_ahead: usize,
    pub n_negatives: usize,
    pub use_mlp_head: bool,
    /// Fraction of valid anchor positions scored per sequence and step;
    /// 1 scores every valid position.
    pub anchor_fraction: f64,
    /// Average the InfoNCE terms over prediction steps (otherwise sum).
    pub mean_over_steps: bool,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 4,
            encoder_width: 512,
            lstm_layers: 2,
            lstm_hidden: 512,
            steps_ahead: 12,
            n_negatives: 128,
            use_mlp_head: true,
            anchor_fraction: 1.0,
            mean_over_steps: true,
        }
    }
}

impl CpcConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("encoder_layers", self.encoder_layers),
            ("encoder_width", self.encoder_width),
            ("lstm_layers", self.lstm_layers),
            ("lstm_hidden", self.lstm_hidden),
            ("steps_ahead", self.steps_ahead),
            ("n_negatives", self.n_negatives),
        ] {
            if v == 0 {
                return Err(Error::config(format!("cpc.{key}"), "must be at least 1"));
            }
        }
        if !(self.anchor_fraction > 0.0 && self.anchor_fraction <= 1.0) {
            return Err(Error::config("cpc.anchor_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvConfig {
    pub depth_blocks: usize,
    pub base_channels: usize,
    pub stem_kernel: usize,
    /// Hidden width of the projector and the BYOL predictor.
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            depth_blocks: 3,
            base_channels: 32,
            stem_kernel: 7,
            projection_hidden: 128,
            projection_dim: 64,
        }
    }
}

impl ConvConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("depth_blocks", self.depth_blocks),
            ("base_channels", self.base_channels),
            ("projection_hidden", self.projection_hidden),
            ("projection_dim", self.projection_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("conv.{key}"), "must be at least 1"));
            }
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::config("conv.stem_kernel", "must be odd"));
        }
        Ok(())
    }

    /// Output channels of residual block `i`: doubling per block, capped at
    /// eight times the base width.
    pub fn block_channels(&self, i: usize) -> usize {
        self.base_channels << i.min(3)
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.block_channels(self.depth_blocks - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Architecture {
    Cpc(CpcConfig),
    Conv(ConvConfig),
}

impl Architecture {
    pub fn kind(&self) -> &'static str {
        match self {
            Architecture::Cpc(_) => "cpc",
            Architecture::Conv(_) => "conv",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Cpc(c) => c.validate(),
            Architecture::Conv(c) => c.validate(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Architecture::Cpc(c) => 3 * c.lstm_hidden,
            Architecture::Conv(c) => c.feature_dim(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Cpc,
    Simclr,
    Byol,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Cpc => "cpc",
            Objective::Simclr => "simclr",
            Objective::Byol => "byol",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// hidden dense + BN + relu + dropout, then linear.
    Full,
    /// BN + dropout, then linear.
    NoHidden,
    /// hidden dense + relu, then linear.
    NoBnDropout,
    /// A single linear layer.
    Linear,
}

impl std::str::FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config("head_variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub n_labels: usize,
    pub variant: HeadVariant,
}

/// Everything needed to rebuild a model's layer structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub n_channels: usize,
    /// Pretext modules to build (prediction heads, projector, predictor).
    pub objective: Option<Objective>,
    pub head: Option<HeadSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.n_channels == 0 {
            return Err(Error::config("n_channels", "must be at least 1"));
        }
        match (self.objective, &self.architecture) {
            (Some(Objective::Cpc), Architecture::Conv(_)) => {
                return Err(Error::config("objective", "cpc needs model = \"cpc\""));
            }
            (Some(Objective::Simclr | Objective::Byol), Architecture::Cpc(_)) => {
                return Err(Error::config(
                    "objective",
                    "simclr and byol need model = \"conv\"",
                ));
            }
            _ => {}
        }
        if let Some(h) = &self.head {
            if h.n_labels == 0 {
                return Err(Error::config("n_labels", "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct CpcBackbone {
    encoder: Vec<(Dense, BatchNorm)>,
    lstm: Lstm,
}

#[derive(Debug, Clone)]
struct ConvBackbone {
    stem: Conv1d,
    stem_bn: BatchNorm,
    blocks: Vec<ConvResidualBlock>,
}

#[derive(Debug, Clone)]
enum Backbone {
    Cpc(CpcBackbone),
    Conv(ConvBackbone),
}

#[derive(Debug, Clone)]
struct PredictionHeads {
    shared: Option<Dense>,
    steps: Vec<Dense>,
}

/// dense (no bias) + BN + relu, then linear.
#[derive(Debug, Clone)]
struct Mlp {
    hidden: Dense,
    bn: BatchNorm,
    out: Dense,
}

impl Mlp {
    fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut crate::rng::Rng,
    ) -> Self {
        Self {
            hidden: Dense::without_bias(
                store,
                &format!("{name}.hidden"),
                d_in,
                hidden,
                LayerGroup::Pretext,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), hidden, LayerGroup::Pretext),
            out: Dense::new(
                store,
                &format!("{name}.out"),
                hidden,
                d_out,
                LayerGroup::Pretext,
                rng,
            ),
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let h = self.hidden.forward(ctx, x, Activation::None)?;
        let h = self.bn.forward(ctx, h, 1, mode)?;
        let h = ctx.tape.relu(h);
        self.out.forward(ctx, h, Activation::None)
    }
}

#[derive(Debug, Clone)]
enum Pretext {
    Cpc(PredictionHeads),
    Simclr { projector: Mlp },
    Byol { projector: Mlp, predictor: Mlp },
}

#[derive(Debug, Clone)]
struct ClassHead {
    variant: HeadVariant,
    hidden: Option<Dense>,
    bn: Option<BatchNorm>,
    out: Dense,
}

/// Layer structure of a model; forward passes read parameters through a
/// [`Ctx`] over the matching store.
#[derive(Debug, Clone)]
pub struct Net {
    spec: ModelSpec,
    backbone: Backbone,
    pretext: Option<Pretext>,
    head: Option<ClassHead>,
}

/// A built model: layer structure plus its parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Net,
    pub store: ParamStore,
}

/// Stacks channel-major `[batch, C, T]` into time-major `[batch, T, C]`.
fn to_time_major(x: &Tensor) -> Result<Tensor> {
    let [b, c, t] = x.shape() else {
        return Err(Error::shape(
            "model input",
            format!("expected [batch, C, T], got {:?}", x.shape()),
        ));
    };
    let (b, c, t) = (*b, *c, *t);
    let src = x.data();
    let mut out = vec![0.0; b * c * t];
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                out[(bi * t + ti) * c + ci] = src[(bi * c + ci) * t + ti];
            }
        }
    }
    Tensor::new(&[b, t, c], out)
}

impl Model {
    /// Builds a freshly initialized model; identical `(spec, seed)` give
    /// identical parameters.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded(derive(seed, "backbone"));
        let backbone = match &spec.architecture {
            Architecture::Cpc(cfg) => {
                let mut encoder = Vec::with_capacity(cfg.encoder_layers);
                let mut d = spec.n_channels;
                for l in 0..cfg.encoder_layers {
                    let name = format!("encoder.{l}");
                    let dense = Dense::without_bias(
                        &mut store,
                        &name,
                        d,
                        cfg.encoder_width,
                        LayerGroup::Stem,
                        &mut rng,
                    );
                    let bn = BatchNorm::new(
                        &mut store,
                        &format!("{name}.bn"),
                        cfg.encoder_width,
                        LayerGroup::Stem,
                    );
                    encoder.push((dense, bn));
                    d = cfg.encoder_width;
                }
                let lstm = Lstm::new(
                    &mut store,
                    "context",
                    cfg.encoder_width,
                    cfg.lstm_hidden,
                    cfg.lstm_layers,
                    LayerGroup::Body,
                    &mut rng,
                );
                Backbone::Cpc(CpcBackbone { encoder, lstm })
            }
            Architecture::Conv(cfg) => {
                let c0 = cfg.base_channels;
                let stem = Conv1d::new(
                    &mut store,
                    "stem",
                    spec.n_channels,
                    c0,
                    cfg.stem_kernel,
                    1,
                    LayerGroup::Stem,
                    &mut rng,
                );
                let stem_bn = BatchNorm::new(&mut store, "stem.bn", c0, LayerGroup::Stem);
                let mut blocks = Vec::with_capacity(cfg.depth_blocks);
                let mut c_in = c0;
                for i in 0..cfg.depth_blocks {
                    let group = if i + 1 == cfg.depth_blocks {
                        LayerGroup::Body
                    } else {
                        LayerGroup::Stem
                    };
                    let c_out = cfg.block_channels(i);
                    blocks.push(ConvResidualBlock::new(
                        &mut store,
                        &format!("block.{i}"),
                        c_in,
                        c_out,
                        2,
                        group,
                        &mut rng,
                    ));
                    c_in = c_out;
                }
                Backbone::Conv(ConvBackbone {
                    stem,
                    stem_bn,
                    blocks,
                })
            }
        };
        let mut rng = seeded(derive(seed, "pretext"));
        let pretext = match (spec.objective, &spec.architecture) {
            (None, _) => None,
            (Some(Objective::Cpc), Architecture::Cpc(cfg)) => {
                let h = cfg.lstm_hidden;
                let shared = cfg.use_mlp_head.then(|| {
                    Dense::new(
                        &mut store,
                        "predict.shared",
                        h,
                        h,
                        LayerGroup::Pretext,
                        &mut rng,
                    )
                });
                let steps = (0..cfg.steps_ahead)
                    .map(|k| {
                        Dense::new(
                            &mut store,
                            &format!("predict.step{}", k + 1),
                            h,
                            cfg.encoder_width,
                            LayerGroup::Pretext,
                            &mut rng,
                        )
                    })
                    .collect();
                Some(Pretext::Cpc(PredictionHeads { shared, steps }))
            }
            (Some(obj), Architecture::Conv(cfg)) => {
                let projector = Mlp::new(
                    &mut store,
                    "projector",
                    cfg.feature_dim(),
                    cfg.projection_hidden,
                    cfg.projection_dim,
                    &mut rng,
                );
                if obj == Objective::Byol {
                    let predictor = Mlp::new(
                        &mut store,
                        "predictor",
                        cfg.projection_dim,
                        cfg.projection_hidden,
                        cfg.projection_dim,
                        &mut rng,
                    );
                    Some(Pretext::Byol {
                        projector,
                        predictor,
                    })
                } else {
                    Some(Pretext::Simclr { projector })
                }
            }
            _ => unreachable!("checked by ModelSpec::validate"),
        };
        let mut model = Self {
            net: Net {
                spec: ModelSpec {
                    head: None,
                    ..spec.clone()
                },
                backbone,
                pretext,
                head: None,
            },
            store,
        };
        if let Some(h) = spec.head {
            model.attach_classification_head(h.n_labels, h.variant, seed)?;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.net.spec
    }

    /// Adds the classification head; a model holds at most one.
    pub fn attach_classification_head(
        &mut self,
        n_labels: usize,
        variant: HeadVariant,
        seed: u64,
    ) -> Result<()> {
        if self.net.head.is_some() {
            return Err(Error::invalid("model already has a classification head"));
        }
        if n_labels == 0 {
            return Err(Error::config("n_labels", "must be at least 1"));
        }
        let mut rng = seeded(derive(seed, "head"));
        let feat = self.net.spec.architecture.feature_dim();
        let g = LayerGroup::Head;
        let store = &mut self.store;
        let head = match variant {
            HeadVariant::Full => ClassHead {
                variant,
                hidden: Some(Dense::without_bias(
                    store,
                    "head.hidden",
                    feat,
                    HEAD_HIDDEN,
                    g,
                    &mut rng,
                )),
                bn: Some(BatchNorm::new(store, "head.bn", HEAD_HIDDEN, g)),
                out: Dense::new(store, "head.out", HEAD_HIDDEN, n_labels, g, &mut rng),
            },
            HeadVariant::NoHidden => ClassHead {
                variant,
                hidden: None,
                bn: Some(BatchNorm::new(store, "head.bn", feat, g)),
                out: Dense::new(store, "head.out", feat, n_labels, g, &mut rng),
            },
            HeadVariant::NoBnDropout => ClassHead {
                variant,
                hidden: Some(Dense::new(
                    store,
                    "head.hidden",
                    feat,
                    HEAD_HIDDEN,
                    g,
                    &mut rng,
                )),
                bn: None,
                out: Dense::new(store, "head.out", HEAD_HIDDEN, n_labels, g, &mut rng),
            },
            HeadVariant::Linear => ClassHead {
                variant,
                hidden: None,
                bn: None,
                out: Dense::new(store, "head.out", feat, n_labels, g, &mut rng),
            },
        };
        self.net.head = Some(head);
        self.net.spec.head = Some(HeadSpec { n_labels, variant });
        Ok(())
    }

    /// Forward-only logits with every BN in eval mode and dropout off.
    pub fn predict_logits(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = self.store.len();
        let mut ctx = Ctx::with_trainable(&mut self.store, 0, vec![false; n]);
        let y = self
            .net
            .logits(&mut ctx, x, BnMode::Eval, BnMode::Eval, false)?;
        Ok(ctx.tape.value(y).clone())
    }

    pub fn n_labels(&self) -> Option<usize> {
        self.net.n_labels()
    }

    /// Weight count of the parameters in `groups`.
    pub fn param_count(&self, groups: &[LayerGroup]) -> usize {
        self.store.count_weights(groups)
    }

    /// Learning rate for every parameter from a per-group rule.
    pub fn lrs_per_param(&self, lr: impl Fn(LayerGroup) -> f64) -> Vec<f64> {
        self.store.entries().iter().map(|e| lr(e.group)).collect()
    }
}

impl Net {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_labels(&self) -> Option<usize> {
        self.spec.head.map(|h| h.n_labels)
    }

    pub fn cpc_config(&self) -> Option<&CpcConfig> {
        match &self.spec.architecture {
            Architecture::Cpc(c) => Some(c),
            Architecture::Conv(_) => None,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            [b, c, t] if *b >= 1 && *c == self.spec.n_channels && *t >= 1 => Ok(()),
            s => Err(Error::shape(
                "model input",
                format!("expected [batch, {}, T], got {s:?}", self.spec.n_channels),
            )),
        }
    }

    /// CPC encoder and context outputs, `z: [batch, T, D]`, `c: [batch, T, H]`.
    pub fn cpc_forward(&self, ctx: &mut Ctx<'_>, x: &Tensor, mode: BnMode) -> Result<(Var, Var)> {
        self.check_input(x)?;
        let Backbone::Cpc(bb) = &self.backbone else {
            return Err(Error::invalid("cpc_forward needs a cpc model"));
        };
        let (b, t) = (x.shape()[0], x.shape()[2]);
        let xt = to_time_major(x)?;
        let mut h = ctx.input(xt.reshape(&[b * t, self.spec.n_channels])?);
        for (dense, bn) in &bb.encoder {
            h = dense.forward(ctx, h, Activation::None)?;
            h = bn.forward(ctx, h, 1, mode)?;
            h = ctx.tape.relu(h);
        }
        let d = ctx.tape.shape(h)[1];
        let z = ctx.tape.reshape(h, &[b, t, d])?;
        let c = bb.lstm.forward(ctx, z)?;
        Ok((z, c))
    }

    /// One prediction `[batch * T, D]` per step ahead, from flattened
    /// context `[batch * T, H]`.
    pub fn cpc_predictions(&self, ctx: &mut Ctx<'_>, c_flat: Var) -> Result<Vec<Var>> {
        let Some(Pretext::Cpc(heads)) = &self.pretext else {
            return Err(Error::invalid("model has no cpc prediction heads"));
        };
        let h = match &heads.shared {
            Some(d) => d.forward(ctx, c_flat, Activation::Relu)?,
            None => c_flat,
        };
        heads
            .steps
            .iter()
            .map(|d| d.forward(ctx, h, Activation::None))
            .collect()
    }

    /// Pooled backbone features `[batch, feature_dim]`.
    pub fn features(&self, ctx: &mut Ctx<'_>, x: &Tensor, mode: BnMode) -> Result<Var> {
        self.check_input(x)?;
        match &self.backbone {
            Backbone::Cpc(_) => {
                let (_, c) = self.cpc_forward(ctx, x, mode)?;
                concat_pool(ctx, c)
            }
            Backbone::Conv(bb) => {
                let mut h = ctx.input(x.clone());
                h = bb.stem.forward(ctx, h)?;
                h = bb.stem_bn.forward(ctx, h, 1, mode)?;
                h = ctx.tape.relu(h);
                for block in &bb.blocks {
                    h = block.forward(ctx, h, mode)?;
                }
                let mean = ctx.tape.mean_axis(h, 2)?;
                let max = ctx.tape.max_axis(h, 2)?;
                ctx.tape.concat_cols(&[mean, max])
            }
        }
    }

    /// SimCLR/BYOL projection of pooled features.
    pub fn project(&self, ctx: &mut Ctx<'_>, feats: Var, mode: BnMode) -> Result<Var> {
        match &self.pretext {
            Some(Pretext::Simclr { projector } | Pretext::Byol { projector, .. }) => {
                projector.forward(ctx, feats, mode)
            }
            _ => Err(Error::invalid("model has no projector")),
        }
    }

    /// BYOL predictor applied to a projection.
    pub fn byol_predict(&self, ctx: &mut Ctx<'_>, proj: Var, mode: BnMode) -> Result<Var> {
        match &self.pretext {
            Some(Pretext::Byol { predictor, .. }) => predictor.forward(ctx, proj, mode),
            _ => Err(Error::invalid("model has no byol predictor")),
        }
    }

    /// Classification logits from pooled features.
    pub fn head_logits(
        &self,
        ctx: &mut Ctx<'_>,
        feats: Var,
        mode: BnMode,
        dropout_active: bool,
    ) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no classification head"))?;
        let mut h = feats;
        match head.variant {
            HeadVariant::Full => {
                h = head
                    .hidden
                    .as_ref()
                    .expect("hidden")
                    .forward(ctx, h, Activation::None)?;
                h = head.bn.as_ref().expect("bn").forward(ctx, h, 1, mode)?;
                h = ctx.tape.relu(h);
                h = dropout(ctx, h, HEAD_DROPOUT, dropout_active)?;
            }
            HeadVariant::NoHidden => {
                h = head.bn.as_ref().expect("bn").forward(ctx, h, 1, mode)?;
                h = dropout(ctx, h, HEAD_DROPOUT, dropout_active)?;
            }
            HeadVariant::NoBnDropout => {
                h = head
                    .hidden
                    .as_ref()
                    .expect("hidden")
                    .forward(ctx, h, Activation::Relu)?;
            }
            HeadVariant::Linear => {}
        }
        head.out.forward(ctx, h, Activation::None)
    }

    /// Logits for a batch; `backbone_mode` and `head_mode` are the BN modes of
    /// the two parts.
    pub fn logits(
        &self,
        ctx: &mut Ctx<'_>,
        x: &Tensor,
        backbone_mode: BnMode,
        head_mode: BnMode,
        dropout_active: bool,
    ) -> Result<Var> {
        let f = self.features(ctx, x, backbone_mode)?;
        self.head_logits(ctx, f, head_mode, dropout_active)
    }
}

/// Discriminative learning rates: head = base, body = base / factor,
/// stem = base / factor².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupLrs {
    pub stem: f64,
    pub body: f64,
    pub head: f64,
}

impl GroupLrs {
    pub fn get(&self, g: LayerGroup) -> f64 {
        match g {
            LayerGroup::Stem => self.stem,
            LayerGroup::Body => self.body,
            LayerGroup::Head | LayerGroup::Pretext => self.head,
        }
    }
}

pub fn layer_group_lrs(base_lr: f64, factor: f64) -> Result<GroupLrs> {
    if !(factor > 0.0) || !base_lr.is_finite() || base_lr < 0.0 {
        return Err(Error::invalid(format!(
            "need factor > 0 and a finite non-negative base lr, got base {base_lr}, factor {factor}"
        )));
    }
    Ok(GroupLrs {
        head: base_lr,
        body: base_lr / factor,
        stem: base_lr / (factor * factor),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use crate::rng::seeded;

    fn toy_cpc(mlp: bool) -> CpcConfig {
        CpcConfig {
            encoder_layers: 2,
            encoder_width: 6,
            lstm_layers: 1,
            lstm_hidden: 5,
            steps_ahead: 3,
            n_negatives: 4,
            use_mlp_head: mlp,
            ..Default::default()
        }
    }

    fn spec(arch: Architecture, objective: Option<Objective>, head: Option<HeadSpec>) -> ModelSpec {
        ModelSpec {
            architecture: arch,
            n_channels: 3,
            objective,
            head,
        }
    }

    #[test]
    fn cpc_shapes() {
        let mut m = Model::build(
            &spec(Architecture::Cpc(toy_cpc(true)), Some(Objective::Cpc), None),
            1,
        )
        .unwrap();
        let x = Tensor::randn(&[2, 3, 9], &mut seeded(0));
        let Model { net: model, store } = &mut m;
        let mut ctx = Ctx::new(store, 0);
        let (z, c) = model.cpc_forward(&mut ctx, &x, BnMode::Train).unwrap();
        assert_eq!(ctx.tape.shape(z), &[2, 9, 6]);
        assert_eq!(ctx.tape.shape(c), &[2, 9, 5]);
        let cf = ctx.tape.reshape(c, &[18, 5]).unwrap();
        let preds = model.cpc_predictions(&mut ctx, cf).unwrap();
        assert_eq!(preds.len(), 3);
        for p in preds {
            assert_eq!(ctx.tape.shape(p), &[18, 6]);
        }
    }

    #[test]
    fn mlp_ablation_removes_exactly_shared_layer() {
        let with = Model::build(
            &spec(Architecture::Cpc(toy_cpc(true)), Some(Objective::Cpc), None),
            1,
        )
        .unwrap();
        let without = Model::build(
            &spec(
                Architecture::Cpc(toy_cpc(false)),
                Some(Objective::Cpc),
                None,
            ),
            1,
        )
        .unwrap();
        let all = [
            LayerGroup::Stem,
            LayerGroup::Body,
            LayerGroup::Head,
            LayerGroup::Pretext,
        ];
        assert_eq!(
            with.param_count(&all) - without.param_count(&all),
            5 * 5 + 5
        );
    }

    #[test]
    fn head_variants_audit() {
        let feat = 15;
        let count = |v| {
            let m = Model::build(
                &spec(
                    Architecture::Cpc(toy_cpc(true)),
                    None,
                    Some(HeadSpec {
                        n_labels: 4,
                        variant: v,
                    }),
                ),
                2,
            )
            .unwrap();
            m.param_count(&[LayerGroup::Head])
        };
        assert_eq!(count(HeadVariant::Linear), feat * 4 + 4);
        assert_eq!(
            count(HeadVariant::Full),
            count(HeadVariant::Linear) - (feat * 4 + 4)
                + feat * HEAD_HIDDEN
                + 2 * HEAD_HIDDEN
                + HEAD_HIDDEN * 4
                + 4
        );
        assert_eq!(
            count(HeadVariant::NoBnDropout),
            feat * HEAD_HIDDEN + HEAD_HIDDEN + HEAD_HIDDEN * 4 + 4
        );
        assert_eq!(count(HeadVariant::NoHidden), 2 * feat + feat * 4 + 4);
        assert!("bogus".parse::<HeadVariant>().is_err());
        assert_eq!(
            "no_bn_dropout".parse::<HeadVariant>().unwrap(),
            HeadVariant::NoBnDropout
        );
    }

    #[test]
    fn linear_head_is_one_matrix() {
        let m = Model::build(
            &spec(
                Architecture::Cpc(toy_cpc(true)),
                None,
                Some(HeadSpec {
                    n_labels: 71,
                    variant: HeadVariant::Linear,
                }),
            ),
            2,
        )
        .unwrap();
        let head: Vec<_> = m
            .store
            .entries()
            .iter()
            .filter(|e| e.group == LayerGroup::Head)
            .collect();
        assert_eq!(head.len(), 2);
        assert_eq!(head[0].value.shape(), &[15, 71]);
        assert_eq!(head[1].value.shape(), &[71]);
    }

    #[test]
    fn default_cpc_size() {
        let m = Model::build(
            &ModelSpec {
                architecture: Architecture::Cpc(CpcConfig::default()),
                n_channels: 12,
                objective: None,
                head: Some(HeadSpec {
                    n_labels: 71,
                    variant: HeadVariant::Full,
                }),
            },
            0,
        )
        .unwrap();
        let n = m.param_count(&[LayerGroup::Stem, LayerGroup::Body, LayerGroup::Head]);
        assert!((n as f64 - 5.8e6).abs() <= 0.2 * 5.8e6, "{n}");
    }

    #[test]
    fn conv_shapes_and_groups() {
        let cfg = ConvConfig {
            depth_blocks: 2,
            base_channels: 4,
            ..Default::default()
        };
        let mut m = Model::build(
            &spec(
                Architecture::Conv(cfg.clone()),
                Some(Objective::Byol),
                Some(HeadSpec {
                    n_labels: 2,
                    variant: HeadVariant::Full,
                }),
            ),
            3,
        )
        .unwrap();
        let x = Tensor::randn(&[2, 3, 250], &mut seeded(0));
        let Model { net: model, store } = &mut m;
        let mut ctx = Ctx::new(store, 0);
        let f = model.features(&mut ctx, &x, BnMode::Train).unwrap();
        assert_eq!(ctx.tape.shape(f), &[2, cfg.feature_dim()]);
        let p = model.project(&mut ctx, f, BnMode::Train).unwrap();
        assert_eq!(ctx.tape.shape(p), &[2, 64]);
        let q = model.byol_predict(&mut ctx, p, BnMode::Train).unwrap();
        assert_eq!(ctx.tape.shape(q), &[2, 64]);
        drop(ctx);
        for g in [
            LayerGroup::Stem,
            LayerGroup::Body,
            LayerGroup::Head,
            LayerGroup::Pretext,
        ] {
            assert!(m.param_count(&[g]) > 0, "{g:?}");
        }
        let deeper = Model::build(
            &spec(
                Architecture::Conv(ConvConfig {
                    depth_blocks: 4,
                    ..cfg
                }),
                None,
                None,
            ),
            3,
        )
        .unwrap();
        assert!(
            deeper.param_count(&[LayerGroup::Stem, LayerGroup::Body])
                > m.param_count(&[LayerGroup::Stem, LayerGroup::Body])
        );
    }

    #[test]
    fn build_is_deterministic_and_validates() {
        let s = spec(Architecture::Cpc(toy_cpc(true)), Some(Objective::Cpc), None);
        assert_eq!(
            Model::build(&s, 4).unwrap().store,
            Model::build(&s, 4).unwrap().store
        );
        assert_ne!(
            Model::build(&s, 4).unwrap().store,
            Model::build(&s, 5).unwrap().store
        );
        let bad = spec(
            Architecture::Cpc(toy_cpc(true)),
            Some(Objective::Simclr),
            None,
        );
        assert!(matches!(Model::build(&bad, 0), Err(Error::Config { .. })));
        let mut zero = toy_cpc(true);
        zero.steps_ahead = 0;
        assert!(Model::build(&spec(Architecture::Cpc(zero), None, None), 0).is_err());
    }

    #[test]
    fn every_parameter_is_a_weight_or_bn_buffer() {
        let m = Model::build(
            &spec(Architecture::Cpc(toy_cpc(true)), Some(Objective::Cpc), None),
            1,
        )
        .unwrap();
        for e in m.store.entries() {
            if e.kind == ParamKind::Buffer {
                assert!(e.name.ends_with("running_mean") || e.name.ends_with("running_var"));
            }
        }
    }

    #[test]
    fn group_lrs() {
        let l = layer_group_lrs(1e-3, 10.0).unwrap();
        assert_eq!((l.head, l.body, l.stem), (1e-3, 1e-3 / 10.0, 1e-3 / 100.0));
        let u = layer_group_lrs(1e-3, 1.0).unwrap();
        assert_eq!((u.head, u.body, u.stem), (1e-3, 1e-3, 1e-3));
        assert!(layer_group_lrs(1e-3, 0.0).is_err());
    }
}
