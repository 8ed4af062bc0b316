//! Contrastive pretext losses: CPC InfoNCE, SimCLR NT-Xent, BYOL regression
//! with an exponential-moving-average target.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore, Tape, Var};
use crate::rng::Rng;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;

/// `n` indices drawn uniformly, with replacement, from `0..t_len` minus the
/// positive `t + k`.
pub fn sample_negatives(
    t_len: usize,
    t: usize,
    k: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if t_len < 2 {
        return Err(Error::invalid(format!(
            "negatives need a sequence of length >= 2, got {t_len}"
        )));
    }
    let pos = t + k;
    if k == 0 || pos >= t_len {
        return Err(Error::invalid(format!(
            "anchor {t} with step {k} is outside length {t_len}"
        )));
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.gen_range(0..t_len - 1);
            if u >= pos {
                u + 1
            } else {
                u
            }
        })
        .collect())
}

/// One scored anchor: sample `b`, position `t`, its negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub b: usize,
    pub t: usize,
    pub negatives: Vec<usize>,
}

/// Anchors and negatives for every prediction step `k = 1..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpcTargets {
    pub t_len: usize,
    pub per_step: Vec<Vec<Anchor>>,
}

/// Draws anchors (every valid position, or a random `fraction` of them) and
/// their negatives for a batch of sequences of length `t_len`.
pub fn sample_cpc_targets(
    batch: usize,
    t_len: usize,
    steps: usize,
    n_negatives: usize,
    fraction: f64,
    rng: &mut Rng,
) -> Result<CpcTargets> {
    if steps == 0 || n_negatives == 0 {
        return Err(Error::invalid("need at least one step and one negative"));
    }
    if t_len <= steps {
        return Err(Error::invalid(format!(
            "sequence length {t_len} leaves no anchor for {steps} steps ahead"
        )));
    }
    let mut per_step = Vec::with_capacity(steps);
    for k in 1..=steps {
        let mut anchors = Vec::new();
        for b in 0..batch {
            for t in 0..t_len - k {
                if fraction < 1.0 && !rng.gen_bool(fraction) {
                    continue;
                }
                let negatives = sample_negatives(t_len, t, k, n_negatives, rng)?;
                anchors.push(Anchor { b, t, negatives });
            }
        }
        per_step.push(anchors);
    }
    if per_step.iter().all(Vec::is_empty) {
        return Err(Error::invalid("anchor subsampling kept no anchors"));
    }
    Ok(CpcTargets { t_len, per_step })
}

/// InfoNCE over dot-product scores.
///
/// `z_flat: [batch * T, D]` are the encodings; `preds[k - 1]: [batch * T, D]`
/// are the step-k predictions from every context position. With
/// `mean_over_steps` the loss is the mean over all (sample, t, k) terms,
/// otherwise the per-step means are summed.
pub fn info_nce_loss(
    tape: &mut Tape,
    z_flat: Var,
    preds: &[Var],
    targets: &CpcTargets,
    mean_over_steps: bool,
) -> Result<Var> {
    if preds.len() != targets.per_step.len() {
        return Err(Error::invalid(format!(
            "{} prediction heads for {} steps",
            preds.len(),
            targets.per_step.len()
        )));
    }
    let t_len = targets.t_len;
    let mut step_logits = Vec::new();
    let mut counts = Vec::new();
    for (k0, (pred, anchors)) in preds.iter().zip(&targets.per_step).enumerate() {
        if anchors.is_empty() {
            continue;
        }
        let k = k0 + 1;
        let n_cand = anchors[0].negatives.len() + 1;
        let mut pairs = Vec::with_capacity(anchors.len() * n_cand);
        for a in anchors {
            if a.negatives.len() + 1 != n_cand {
                return Err(Error::invalid(
                    "every anchor needs the same number of negatives",
                ));
            }
            let row = a.b * t_len + a.t;
            pairs.push((row, a.b * t_len + a.t + k));
            pairs.extend(a.negatives.iter().map(|&j| (row, a.b * t_len + j)));
        }
        let scores = tape.pair_dots(*pred, z_flat, &pairs)?;
        step_logits.push(tape.reshape(scores, &[anchors.len(), n_cand])?);
        counts.push(anchors.len());
    }
    if mean_over_steps {
        let widths: Vec<usize> = step_logits.iter().map(|v| tape.shape(*v)[1]).collect();
        if widths.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::invalid("negative counts differ across steps"));
        }
        let rows: usize = counts.iter().sum();
        // row-stacking equal-width blocks is a flat concatenation
        let all = concat_1d(tape, &step_logits)?;
        let logits = tape.reshape(all, &[rows, widths[0]])?;
        tape.cross_entropy(logits, &vec![0; rows], None)
    } else {
        let mut total: Option<Var> = None;
        for l in step_logits {
            let rows = tape.shape(l)[0];
            let ce = tape.cross_entropy(l, &vec![0; rows], None)?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
        Ok(total.expect("at least one step has anchors"))
    }
}

fn concat_1d(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let rows: Vec<Var> = parts
        .iter()
        .map(|v| {
            let n = tape.value(*v).len();
            tape.reshape(*v, &[1, n])
        })
        .collect::<Result<_>>()?;
    let cat = tape.concat_cols(&rows)?;
    let n = tape.value(cat).len();
    tape.reshape(cat, &[n])
}

/// NT-Xent over two views `[batch, D]`.
pub fn nt_xent_loss(tape: &mut Tape, view1: Var, view2: Var, temperature: f64) -> Result<Var> {
    if tape.shape(view1) != tape.shape(view2) || tape.shape(view1).len() != 2 {
        return Err(Error::shape(
            "nt_xent",
            format!("{:?} vs {:?}", tape.shape(view1), tape.shape(view2)),
        ));
    }
    let (b, d) = (tape.shape(view1)[0], tape.shape(view1)[1]);
    if b < 2 {
        return Err(Error::invalid(format!("nt_xent needs batch >= 2, got {b}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let both = tape.stack(&[view1, view2], 0)?;
    let both = tape.reshape(both, &[2 * b, d])?;
    let z = tape.l2_normalize_rows(both)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let n = 2 * b;
    let mut exclude = vec![false; n * n];
    for i in 0..n {
        exclude[i * n + i] = true;
    }
    let targets: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    tape.cross_entropy(logits, &targets, Some(&exclude))
}

/// Mean over the batch of `2 - 2 cos(online_pred, target_proj)`; the target
/// is detached.
pub fn byol_loss(tape: &mut Tape, online_pred: Var, target_proj: Var) -> Result<Var> {
    if tape.shape(online_pred) != tape.shape(target_proj) || tape.shape(online_pred).len() != 2 {
        return Err(Error::shape(
            "byol",
            format!(
                "{:?} vs {:?}",
                tape.shape(online_pred),
                tape.shape(target_proj)
            ),
        ));
    }
    let b = tape.shape(online_pred)[0];
    if b == 0 {
        return Err(Error::invalid("byol needs a non-empty batch"));
    }
    let target = tape.constant(tape.value(target_proj).clone());
    let p = tape.l2_normalize_rows(online_pred)?;
    let t = tape.l2_normalize_rows(target)?;
    let prod = tape.mul(p, t)?;
    let cos = tape.row_sum(prod)?;
    let mean_cos = tape.mean(cos);
    let neg = tape.scale(mean_cos, -2.0);
    Ok(tape.add_const(neg, 2.0))
}

/// Both view assignments, averaged.
pub fn byol_symmetric_loss(tape: &mut Tape, p1: Var, t2: Var, p2: Var, t1: Var) -> Result<Var> {
    let a = byol_loss(tape, p1, t2)?;
    let b = byol_loss(tape, p2, t1)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

/// Exponential-moving-average copy of a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub target: ParamStore,
    pub tau: f64,
}

impl EmaState {
    pub fn new(online: &ParamStore, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!(
                "ema decay must be in [0, 1], got {tau}"
            )));
        }
        Ok(Self {
            target: online.clone(),
            tau,
        })
    }

    /// `target <- tau * target + (1 - tau) * online` for every weight; the
    /// target's batch-norm buffers follow its own forward passes.
    pub fn update(&mut self, online: &ParamStore) -> Result<()> {
        if online.len() != self.target.len() {
            return Err(Error::shape(
                "ema_update",
                format!("{} vs {} tensors", online.len(), self.target.len()),
            ));
        }
        for (t, o) in self.target.entries().iter().zip(online.entries()) {
            if t.name != o.name || t.value.shape() != o.value.shape() {
                return Err(Error::shape(
                    "ema_update",
                    format!(
                        "{} {:?} vs {} {:?}",
                        t.name,
                        t.value.shape(),
                        o.name,
                        o.value.shape()
                    ),
                ));
            }
        }
        let tau = self.tau;
        for id in online.ids() {
            if online.entry(id).kind != ParamKind::Weight {
                continue;
            }
            let src = online.get(id).data();
            for (t, o) in self.target.get_mut(id).data_mut().iter_mut().zip(src) {
                *t = tau * *t + (1.0 - tau) * o;
            }
        }
        Ok(())
    }
}
