//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::models::{Architecture, CpcConfig, Model, ModelSpec, Objective};
use crate::nn::layers::{
    concat_pool, dropout, Activation, BatchNorm, BnMode, ConvResidualBlock, Ctx, Dense, Lstm,
};
use crate::nn::params::{LayerGroup, ParamId, ParamStore};
use crate::nn::tape::Var;
use crate::nn::tensor::Tensor;
use crate::objectives::{byol_loss, info_nce_loss, nt_xent_loss, sample_cpc_targets};
use crate::rng::{derive, seeded};

/// Small enough that perturbations rarely straddle a relu or max kink; f64
/// keeps the roundoff of the difference quotient far below the tolerances.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so near-zero gradients are judged
/// on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of `loss_fn` with central differences on up to
/// `max_per_param` evenly spaced elements of every trainable parameter.
///
/// `loss_fn` must be deterministic given the context seed; every evaluation
/// runs on a fresh clone of `store` so buffer updates do not leak between
/// evaluations.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    ctx_seed: u64,
    max_per_param: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut s = s.clone();
        let mut ctx = Ctx::new(&mut s, ctx_seed);
        let loss = loss_fn(&mut ctx)?;
        Ok(ctx.tape.value(loss).item())
    };
    let grads = {
        let mut s = store.clone();
        let mut ctx = Ctx::new(&mut s, ctx_seed);
        let loss = loss_fn(&mut ctx)?;
        ctx.backward(loss)?
    };
    let mut params = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let id = ParamId(i);
        let n = g.len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let mut worst = 0.0f64;
        let mut checked = 0;
        for e in (0..n).step_by(stride) {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[e] += FD_STEP;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[e], numeric));
            checked += 1;
        }
        params.push(ParamCheck {
            name: store.entry(id).name.clone(),
            checked,
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { params })
}

/// Tolerance for every case except batch norm.
pub const SUITE_TOL: f64 = 1e-4;
/// Batch statistics make batch-norm differences noisier.
pub const SUITE_TOL_BN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

/// `sum(v * w)` for a fixed random `w`, so every output element gets a
/// distinct upstream gradient.
fn project(ctx: &mut Ctx<'_>, v: Var, seed: u64) -> Result<Var> {
    let shape = ctx.tape.shape(v).to_vec();
    let w = Tensor::randn(&shape, &mut seeded(seed));
    let w = ctx.tape.constant(w);
    let p = ctx.tape.mul(v, w)?;
    Ok(ctx.tape.sum(p))
}

/// Gradient checks of every layer, every loss and the composed CPC
/// backbone on small random problems.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = seeded(derive(seed, "gradcheck"));
    let mut cases = Vec::new();
    let n = 40;

    {
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "dense", 4, 3, LayerGroup::Head, &mut rng);
        let x = Tensor::randn(&[5, 4], &mut rng);
        let report = finite_diff_check(&store, seed, n, |ctx| {
            let xv = ctx.input(x.clone());
            let h = d.forward(ctx, xv, Activation::None)?;
            let h = ctx.tape.tanh(h);
            project(ctx, h, 1)
        })?;
        cases.push(SuiteCase {
            name: "dense",
            tolerance: SUITE_TOL,
            report,
        });
    }
    {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3, LayerGroup::Body);
        let x = store.weight("x", Tensor::randn(&[6, 3, 4], &mut rng), LayerGroup::Body);
        let report = finite_diff_check(&store, seed, n, |ctx| {
            let xv = ctx.param(x);
            let h = bn.forward(ctx, xv, 1, BnMode::Train)?;
            project(ctx, h, 2)
        })?;
        cases.push(SuiteCase {
            name: "batchnorm_train",
            tolerance: SUITE_TOL_BN,
            report,
        });
    }
    {
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "dense", 4, 4, LayerGroup::Head, &mut rng);
        let x = Tensor::randn(&[3, 4], &mut rng);
        let report = finite_diff_check(&store, seed, n, |ctx| {
            let xv = ctx.input(x.clone());
            let h = d.forward(ctx, xv, Activation::None)?;
            let h = dropout(ctx, h, 0.5, false)?;
            project(ctx, h, 3)
        })?;
        cases.push(SuiteCase {
            name: "dropout_off",
            tolerance: SUITE_TOL,
            report,
        });
    }
    {
        let mut store = ParamStore::new();
        let block =
            ConvResidualBlock::new(&mut store, "block", 2, 3, 2, LayerGroup::Body, &mut rng);
        let x = store.weight("x", Tensor::randn(&[3, 2, 12], &mut rng), LayerGroup::Body);
        let report = finite_diff_check(&store, seed, n, |ctx| {
            let xv = ctx.param(x);
            let h = block.forward(ctx, xv, BnMode::Train)?;
            project(ctx, h, 4)
        })?;
        cases.push(SuiteCase {
            name: "conv_residual_block",
            tolerance: SUITE_TOL_BN,
            report,
        });
    }
    {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", 3, 4, 2, LayerGroup::Body, &mut rng);
        let x = store.weight("x", Tensor::randn(&[2, 5, 3], &mut rng), LayerGroup::Body);
        let report = finite_diff_check(&store, seed, n, |ctx| {
            let xv = ctx.param(x);
            let h = lstm.forward(ctx, xv)?;
            project(ctx, h, 5)
        })?;
        cases.push(SuiteCase {
            name: "lstm",
            tolerance: SUITE_TOL,
            report,
        });
    }
    {
        let mut store = ParamStore::new();
        let h = store.weight("h", Tensor::randn(&[2, 5, 3], &mut rng), LayerGroup::Body);
        let report = finite_diff_check(&store, seed, n, |ctx| {
            let hv = ctx.param(h);
            let p = concat_pool(ctx, hv)?;
            project(ctx, p, 6)
        })?;
        cases.push(SuiteCase {
            name: "concat_pool",
            tolerance: SUITE_TOL,
            report,
        });
    }
    {
        let (b, t, d, steps) = (2, 6, 3, 2);
        let mut store = ParamStore::new();
        let z = store.weight(
            "z",
            Tensor::randn(&[b * t, d], &mut rng),
            LayerGroup::Pretext,
        );
        let preds: Vec<ParamId> = (0..steps)
            .map(|k| {
                store.weight(
                    format!("pred{k}"),
                    Tensor::randn(&[b * t, d], &mut rng),
                    LayerGroup::Pretext,
                )
            })
            .collect();
        let targets = sample_cpc_targets(b, t, steps, 3, 1.0, &mut rng)?;
        let report = finite_diff_check(&store, seed, n, |ctx| {
            let zv = ctx.param(z);
            let pv: Vec<Var> = preds.iter().map(|&p| ctx.param(p)).collect();
            info_nce_loss(&mut ctx.tape, zv, &pv, &targets, true)
        })?;
        cases.push(SuiteCase {
            name: "info_nce",
            tolerance: SUITE_TOL,
            report,
        });
    }
    {
        let mut store = ParamStore::new();
        let v1 = store.weight("v1", Tensor::randn(&[3, 4], &mut rng), LayerGroup::Pretext);
        let v2 = store.weight("v2", Tensor::randn(&[3, 4], &mut rng), LayerGroup::Pretext);
        let report = finite_diff_check(&store, seed, n, |ctx| {
            let (a, b) = (ctx.param(v1), ctx.param(v2));
            nt_xent_loss(&mut ctx.tape, a, b, 0.5)
        })?;
        cases.push(SuiteCase {
            name: "nt_xent",
            tolerance: SUITE_TOL,
            report,
        });
    }
    {
        let mut store = ParamStore::new();
        let p = store.weight("p", Tensor::randn(&[3, 4], &mut rng), LayerGroup::Pretext);
        let t = Tensor::randn(&[3, 4], &mut rng);
        let report = finite_diff_check(&store, seed, n, |ctx| {
            let pv = ctx.param(p);
            let tv = ctx.input(t.clone());
            byol_loss(&mut ctx.tape, pv, tv)
        })?;
        cases.push(SuiteCase {
            name: "byol",
            tolerance: SUITE_TOL,
            report,
        });
    }
    {
        let cpc = CpcConfig {
            encoder_layers: 2,
            encoder_width: 4,
            lstm_layers: 1,
            lstm_hidden: 4,
            steps_ahead: 2,
            n_negatives: 3,
            ..CpcConfig::default()
        };
        let spec = ModelSpec {
            architecture: Architecture::Cpc(cpc),
            n_channels: 2,
            objective: Some(Objective::Cpc),
            head: None,
        };
        let model = Model::build(&spec, derive(seed, "cpc"))?;
        let (b, t) = (2, 6);
        let x = Tensor::randn(&[b, 2, t], &mut rng);
        let targets = sample_cpc_targets(b, t, 2, 3, 1.0, &mut rng)?;
        let net = &model.net;
        let report = finite_diff_check(&model.store, seed, 12, |ctx| {
            let (z, c) = net.cpc_forward(ctx, &x, BnMode::Train)?;
            let d = ctx.tape.shape(z)[2];
            let h = ctx.tape.shape(c)[2];
            let z = ctx.tape.reshape(z, &[b * t, d])?;
            let c = ctx.tape.reshape(c, &[b * t, h])?;
            let preds = net.cpc_predictions(ctx, c)?;
            info_nce_loss(&mut ctx.tape, z, &preds, &targets, true)
        })?;
        cases.push(SuiteCase {
            name: "cpc_backbone",
            tolerance: SUITE_TOL_BN,
            report,
        });
    }
    Ok(cases)
}
