//! Layer types built on the tape, and the forward context that binds a
//! parameter store onto a fresh tape.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{LayerGroup, ParamId, ParamKind, ParamStore};
use crate::nn::tape::{BnStats, Tape, Var};
use crate::nn::tensor::Tensor;
use crate::rng::{seeded, Rng};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Forward context: one tape plus lazily bound parameters.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s mut ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
    rng: Rng,
}

impl<'s> Ctx<'s> {
    /// All weights trainable.
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        let mask = store
            .entries()
            .iter()
            .map(|e| e.kind == ParamKind::Weight)
            .collect();
        Self::with_trainable(store, seed, mask)
    }

    /// Only weights flagged in `trainable` receive gradients.
    pub fn with_trainable(store: &'s mut ParamStore, seed: u64, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), store.len(), "trainable mask length");
        Self {
            tape: Tape::new(),
            bound: vec![None; store.len()],
            store,
            trainable,
            rng: seeded(seed),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.trainable[id.0];
        let v = self.tape.leaf(self.store.get(id).clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradients of `loss` for every bound trainable parameter, by id.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let mut g = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(v) if self.trainable[i] => g.take(*v),
                _ => None,
            })
            .collect())
    }

    fn update_running(&mut self, mean_id: ParamId, var_id: ParamId, mean: &[f64], var: &[f64]) {
        for (r, m) in self.store.get_mut(mean_id).data_mut().iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.store.get_mut(var_id).data_mut().iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

fn apply_act(ctx: &mut Ctx<'_>, x: Var, act: Activation) -> Var {
    match act {
        Activation::None => x,
        Activation::Relu => ctx.tape.relu(x),
    }
}

/// `y = act(x W + b)`, `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: LayerGroup,
        rng: &mut Rng,
    ) -> Self {
        let bound = (6.0 / d_in as f64).sqrt();
        let w = store.weight(
            format!("{name}.weight"),
            Tensor::uniform(&[d_in, d_out], bound, rng),
            group,
        );
        let b = Some(store.weight(format!("{name}.bias"), Tensor::zeros(&[d_out]), group));
        Self { w, b, d_in, d_out }
    }

    /// For layers followed by batch norm, where a bias would be redundant.
    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: LayerGroup,
        rng: &mut Rng,
    ) -> Self {
        let bound = (6.0 / d_in as f64).sqrt();
        let w = store.weight(
            format!("{name}.weight"),
            Tensor::uniform(&[d_in, d_out], bound, rng),
            group,
        );
        Self {
            w,
            b: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, act: Activation) -> Result<Var> {
        if ctx.tape.shape(x).len() != 2 || ctx.tape.shape(x)[1] != self.d_in {
            return Err(Error::shape(
                "dense",
                format!("input {:?} for d_in {}", ctx.tape.shape(x), self.d_in),
            ));
        }
        let w = ctx.param(self.w);
        let mut h = ctx.tape.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = ctx.param(b);
            h = ctx.tape.add_row(h, b)?;
        }
        Ok(apply_act(ctx, h, act))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Running statistics; nothing updated.
    Eval,
    /// Running statistics for the output, running statistics still updated
    /// from the batch.
    StatsOnly,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

/// Per-channel mean and unbiased variance of `x` around `axis`.
fn channel_moments(x: &Tensor, axis: usize) -> (Vec<f64>, Vec<f64>) {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let c = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let n = (outer * inner) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            for i in 0..inner {
                mean[ch] += d[(o * c + ch) * inner + i];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for o in 0..outer {
        for ch in 0..c {
            for i in 0..inner {
                var[ch] += (d[(o * c + ch) * inner + i] - mean[ch]).powi(2);
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= (n - 1.0).max(1.0));
    (mean, var)
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: LayerGroup) -> Self {
        Self {
            gamma: store.weight(format!("{name}.gamma"), Tensor::ones(&[channels]), group),
            beta: store.weight(format!("{name}.beta"), Tensor::zeros(&[channels]), group),
            running_mean: store.buffer(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                group,
            ),
            running_var: store.buffer(
                format!("{name}.running_var"),
                Tensor::ones(&[channels]),
                group,
            ),
            channels,
        }
    }

    /// Normalizes over every axis except `axis`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, axis: usize, mode: BnMode) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match mode {
            BnMode::Train => {
                let (y, moments) =
                    ctx.tape
                        .batch_norm(x, g, b, axis, BnStats::Batch { eps: BN_EPS })?;
                let m = moments.expect("batch statistics");
                ctx.update_running(self.running_mean, self.running_var, &m.mean, &m.var);
                Ok(y)
            }
            BnMode::Eval | BnMode::StatsOnly => {
                let mean = ctx.store.get(self.running_mean).data().to_vec();
                let var = ctx.store.get(self.running_var).data().to_vec();
                let (y, _) = ctx.tape.batch_norm(
                    x,
                    g,
                    b,
                    axis,
                    BnStats::Fixed {
                        mean: &mean,
                        var: &var,
                        eps: BN_EPS,
                    },
                )?;
                if mode == BnMode::StatsOnly {
                    let (bm, bv) = channel_moments(ctx.tape.value(x), axis);
                    ctx.update_running(self.running_mean, self.running_var, &bm, &bv);
                }
                Ok(y)
            }
        }
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)`; identity when
/// inactive.
pub fn dropout(ctx: &mut Ctx<'_>, x: Var, p: f64, active: bool) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if !active || p == 0.0 {
        return Ok(x);
    }
    let n = ctx.tape.value(x).len();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if ctx.rng.gen_bool(p) { 0.0 } else { keep })
        .collect();
    ctx.tape.mul_const(x, mask)
}

/// Bias-free same-padded 1-D convolution, `w: [c_out, c_in, kernel]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        group: LayerGroup,
        rng: &mut Rng,
    ) -> Self {
        let bound = (6.0 / (c_in * kernel) as f64).sqrt();
        let w = store.weight(
            format!("{name}.weight"),
            Tensor::uniform(&[c_out, c_in, kernel], bound, rng),
            group,
        );
        Self {
            w,
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        ctx.tape.conv1d(x, w, self.stride)
    }
}

/// conv(k=5, stride) -> BN -> relu -> conv(k=3) -> BN, plus an identity or
/// 1x1-projected skip, then relu.
#[derive(Debug, Clone)]
pub struct ConvResidualBlock {
    pub conv1: Conv1d,
    pub bn1: BatchNorm,
    pub conv2: Conv1d,
    pub bn2: BatchNorm,
    pub proj: Option<(Conv1d, BatchNorm)>,
}

impl ConvResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        group: LayerGroup,
        rng: &mut Rng,
    ) -> Self {
        let conv1 = Conv1d::new(
            store,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            5,
            stride,
            group,
            rng,
        );
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), c_out, group);
        let conv2 = Conv1d::new(
            store,
            &format!("{name}.conv2"),
            c_out,
            c_out,
            3,
            1,
            group,
            rng,
        );
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), c_out, group);
        let proj = (c_in != c_out || stride != 1).then(|| {
            (
                Conv1d::new(
                    store,
                    &format!("{name}.proj"),
                    c_in,
                    c_out,
                    1,
                    stride,
                    group,
                    rng,
                ),
                BatchNorm::new(store, &format!("{name}.proj_bn"), c_out, group),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, mode: BnMode) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h, 1, mode)?;
        let h = ctx.tape.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h, 1, mode)?;
        let skip = match &self.proj {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s, 1, mode)?
            }
            None => x,
        };
        let y = ctx.tape.add(h, skip)?;
        Ok(ctx.tape.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct LstmLayer {
    /// `[d_in, 4H]`, gate order input, forget, cell, output.
    pub w_ih: ParamId,
    /// `[H, 4H]`.
    pub w_hh: ParamId,
    /// `[4H]`.
    pub bias: ParamId,
    pub d_in: usize,
}

/// Stacked LSTM with zero initial state, `[batch, T, d_in] -> [batch, T, H]`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        n_layers: usize,
        group: LayerGroup,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let layers = (0..n_layers)
            .map(|l| {
                let din = if l == 0 { d_in } else { hidden };
                let w_ih = store.weight(
                    format!("{name}.l{l}.w_ih"),
                    Tensor::uniform(&[din, 4 * hidden], bound, rng),
                    group,
                );
                let w_hh = store.weight(
                    format!("{name}.l{l}.w_hh"),
                    Tensor::uniform(&[hidden, 4 * hidden], bound, rng),
                    group,
                );
                let mut b = Tensor::uniform(&[4 * hidden], bound, rng);
                for v in &mut b.data_mut()[hidden..2 * hidden] {
                    *v += 1.0;
                }
                let bias = store.weight(format!("{name}.l{l}.bias"), b, group);
                LstmLayer {
                    w_ih,
                    w_hh,
                    bias,
                    d_in: din,
                }
            })
            .collect();
        Self { layers, hidden }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (b, t, d) = match ctx.tape.shape(x) {
            [b, t, d] => (*b, *t, *d),
            s => {
                return Err(Error::shape(
                    "lstm",
                    format!("input must be [batch, T, d], got {s:?}"),
                ))
            }
        };
        if t == 0 {
            return Err(Error::invalid("lstm needs at least one timestep"));
        }
        let h_dim = self.hidden;
        let mut cur = x;
        let mut cur_d = d;
        for layer in &self.layers {
            if cur_d != layer.d_in {
                return Err(Error::shape(
                    "lstm",
                    format!("feature size {cur_d} for layer input {}", layer.d_in),
                ));
            }
            let w_ih = ctx.param(layer.w_ih);
            let w_hh = ctx.param(layer.w_hh);
            let bias = ctx.param(layer.bias);
            // input projections for all timesteps in one product
            let flat = ctx.tape.reshape(cur, &[b * t, cur_d])?;
            let gx = ctx.tape.matmul(flat, w_ih)?;
            let gx = ctx.tape.add_row(gx, bias)?;
            let gx = ctx.tape.reshape(gx, &[b, t, 4 * h_dim])?;
            let mut h: Option<Var> = None;
            let mut c: Option<Var> = None;
            let mut outs = Vec::with_capacity(t);
            for step in 0..t {
                let mut gates = ctx.tape.select(gx, 1, step)?;
                if let Some(hp) = h {
                    let rec = ctx.tape.matmul(hp, w_hh)?;
                    gates = ctx.tape.add(gates, rec)?;
                }
                let i = ctx.tape.slice_cols(gates, 0, h_dim)?;
                let i = ctx.tape.sigmoid(i);
                let f = ctx.tape.slice_cols(gates, h_dim, h_dim)?;
                let f = ctx.tape.sigmoid(f);
                let g = ctx.tape.slice_cols(gates, 2 * h_dim, h_dim)?;
                let g = ctx.tape.tanh(g);
                let o = ctx.tape.slice_cols(gates, 3 * h_dim, h_dim)?;
                let o = ctx.tape.sigmoid(o);
                let ig = ctx.tape.mul(i, g)?;
                let c_new = match c {
                    Some(cp) => {
                        let fc = ctx.tape.mul(f, cp)?;
                        ctx.tape.add(fc, ig)?
                    }
                    None => ig,
                };
                let tc = ctx.tape.tanh(c_new);
                let h_new = ctx.tape.mul(o, tc)?;
                outs.push(h_new);
                h = Some(h_new);
                c = Some(c_new);
            }
            cur = ctx.tape.stack(&outs, 1)?;
            cur_d = h_dim;
        }
        Ok(cur)
    }
}

/// `[batch, T, H] -> [batch, 3H]`: max over time, mean over time, last step.
pub fn concat_pool(ctx: &mut Ctx<'_>, h: Var) -> Result<Var> {
    let t = match ctx.tape.shape(h) {
        [_, t, _] if *t >= 1 => *t,
        s => {
            return Err(Error::shape(
                "concat_pool",
                format!("expected [batch, T >= 1, H], got {s:?}"),
            ))
        }
    };
    let mx = ctx.tape.max_axis(h, 1)?;
    let mean = ctx.tape.mean_axis(h, 1)?;
    let last = ctx.tape.select(h, 1, t - 1)?;
    ctx.tape.concat_cols(&[mx, mean, last])
}
