//! Stochastic augmentations for instance-contrastive pretraining.
//!
//! Every transform maps a segment `[n_channels x len]` to a segment of the
//! same shape and is deterministic given `(input, params, rng state)`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::physio::{apply_physio_noise, PhysioParams};
use crate::record::{Segment, Waveform};
use crate::rng::Rng;

pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
pub const BLUR_KERNEL: [f64; 5] = [0.1, 0.2, 0.4, 0.2, 0.1];
pub const DEFAULT_RESIZE_BASE: f64 = 3.0;
pub const DEFAULT_RRC: (f64, f64) = (0.5, 1.0);
pub const DEFAULT_TIMEOUT: (f64, f64) = (0.0, 0.5);
pub const DEFAULT_WARPS: usize = 3;
pub const DEFAULT_WARP_RADIUS: usize = 10;

/// One augmentation with its parameters.
///
/// In configuration files a transform is either a short name (`"rrc"`) or an
/// object with a `kind` plus parameter overrides (`{"kind": "to", "max": 0.3}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub enum TransformSpec {
    GaussianNoise {
        sigma: f64,
    },
    GaussianBlur {
        kernel: Vec<f64>,
    },
    ChannelResize {
        base: f64,
    },
    RandomResizedCrop {
        min: f64,
        max: f64,
    },
    TimeOut {
        min: f64,
        max: f64,
    },
    DynamicTimeWarp {
        warps: usize,
        radius: usize,
    },
    /// Superposition of the four physiological noise models.
    PhysioNoise(PhysioParams),
}

impl TransformSpec {
    pub fn short_name(&self) -> &'static str {
        match self {
            TransformSpec::GaussianNoise { .. } => "gn",
            TransformSpec::GaussianBlur { .. } => "gb",
            TransformSpec::ChannelResize { .. } => "cr",
            TransformSpec::RandomResizedCrop { .. } => "rrc",
            TransformSpec::TimeOut { .. } => "to",
            TransformSpec::DynamicTimeWarp { .. } => "dtw",
            TransformSpec::PhysioNoise(_) => "physio",
        }
    }

    /// Default-parameterized transform for a short name.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "gn" | "gaussian_noise" => TransformSpec::GaussianNoise {
                sigma: DEFAULT_NOISE_SIGMA,
            },
            "gb" | "gaussian_blur" => TransformSpec::GaussianBlur {
                kernel: BLUR_KERNEL.to_vec(),
            },
            "cr" | "channel_resize" => TransformSpec::ChannelResize {
                base: DEFAULT_RESIZE_BASE,
            },
            "rrc" | "random_resized_crop" => TransformSpec::RandomResizedCrop {
                min: DEFAULT_RRC.0,
                max: DEFAULT_RRC.1,
            },
            "to" | "time_out" => TransformSpec::TimeOut {
                min: DEFAULT_TIMEOUT.0,
                max: DEFAULT_TIMEOUT.1,
            },
            "dtw" | "dynamic_time_warp" => TransformSpec::DynamicTimeWarp {
                warps: DEFAULT_WARPS,
                radius: DEFAULT_WARP_RADIUS,
            },
            "physio" | "physio_noise" => TransformSpec::PhysioNoise(PhysioParams::pretraining()),
            other => {
                return Err(Error::config(
                    "transforms",
                    format!("unknown transform `{other}`"),
                ))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::config(
                format!("transforms.{}", self.short_name()),
                msg,
            ))
        };
        match self {
            TransformSpec::GaussianNoise { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("sigma must be >= 0, got {sigma}"))
            }
            TransformSpec::GaussianBlur { kernel } => {
                let sum: f64 = kernel.iter().sum();
                if kernel.is_empty() || kernel.len() % 2 == 0 {
                    bad("kernel must have odd, non-zero length".into())
                } else if (sum - 1.0).abs() > 1e-12 {
                    bad(format!("kernel entries must sum to 1, got {sum}"))
                } else if kernel.iter().any(|k| *k < 0.0) {
                    bad("kernel entries must be non-negative".into())
                } else {
                    Ok(())
                }
            }
            TransformSpec::ChannelResize { base } if !(*base >= 1.0 && base.is_finite()) => {
                bad(format!("base must be >= 1, got {base}"))
            }
            TransformSpec::RandomResizedCrop { min, max }
                if !(0.0 < *min && min <= max && *max <= 1.0) =>
            {
                bad(format!("need 0 < min <= max <= 1, got ({min}, {max})"))
            }
            TransformSpec::TimeOut { min, max } if !(0.0 <= *min && min <= max && *max <= 1.0) => {
                bad(format!("need 0 <= min <= max <= 1, got ({min}, {max})"))
            }
            TransformSpec::DynamicTimeWarp { radius, .. } if *radius < 1 => {
                bad("radius must be >= 1".into())
            }
            TransformSpec::PhysioNoise(p) => p.validate(),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, seg: &Segment, rng: &mut Rng) -> Result<Segment> {
        match self {
            TransformSpec::GaussianNoise { sigma } => gaussian_noise(seg, *sigma, rng),
            TransformSpec::GaussianBlur { kernel } => convolve_replicate(seg, kernel),
            TransformSpec::ChannelResize { base } => channel_resize(seg, *base, rng),
            TransformSpec::RandomResizedCrop { min, max } => {
                random_resized_crop(seg, *min, *max, rng)
            }
            TransformSpec::TimeOut { min, max } => time_out(seg, *min, *max, rng),
            TransformSpec::DynamicTimeWarp { warps, radius } => {
                dynamic_time_warp(seg, *warps, *radius, rng)
            }
            TransformSpec::PhysioNoise(p) => Ok(apply_physio_noise(seg, p, rng)?.segment),
        }
    }
}

fn num(map: &Map<String, Value>, key: &str, default: f64) -> Result<f64> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::config(format!("transforms.{key}"), "expected a number")),
    }
}

fn count(map: &Map<String, Value>, key: &str, default: usize) -> Result<usize> {
    match map.get(key) {
        None => Ok(default),
        Some(v) => v.as_u64().map(|n| n as usize).ok_or_else(|| {
            Error::config(
                format!("transforms.{key}"),
                "expected a non-negative integer",
            )
        }),
    }
}

impl TryFrom<Value> for TransformSpec {
    type Error = Error;

    fn try_from(v: Value) -> Result<Self> {
        let spec = match v {
            Value::String(name) => TransformSpec::by_name(&name)?,
            Value::Object(map) => {
                let kind = map
                    .get("kind")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::config("transforms.kind", "missing transform kind"))?;
                match TransformSpec::by_name(kind)? {
                    TransformSpec::GaussianNoise { sigma } => TransformSpec::GaussianNoise {
                        sigma: num(&map, "sigma", sigma)?,
                    },
                    TransformSpec::GaussianBlur { kernel } => TransformSpec::GaussianBlur {
                        kernel: match map.get("kernel") {
                            None => kernel,
                            Some(k) => serde_json::from_value(k.clone())
                                .map_err(|e| Error::config("transforms.kernel", e.to_string()))?,
                        },
                    },
                    TransformSpec::ChannelResize { base } => TransformSpec::ChannelResize {
                        base: num(&map, "base", base)?,
                    },
                    TransformSpec::RandomResizedCrop { min, max } => {
                        TransformSpec::RandomResizedCrop {
                            min: num(&map, "min", min)?,
                            max: num(&map, "max", max)?,
                        }
                    }
                    TransformSpec::TimeOut { min, max } => TransformSpec::TimeOut {
                        min: num(&map, "min", min)?,
                        max: num(&map, "max", max)?,
                    },
                    TransformSpec::DynamicTimeWarp { warps, radius } => {
                        TransformSpec::DynamicTimeWarp {
                            warps: count(&map, "warps", warps)?,
                            radius: count(&map, "radius", radius)?,
                        }
                    }
                    TransformSpec::PhysioNoise(_) => {
                        let mut body = map.clone();
                        body.remove("kind");
                        let p: PhysioParams = serde_json::from_value(Value::Object(body))
                            .map_err(|e| Error::config("transforms.physio", e.to_string()))?;
                        TransformSpec::PhysioNoise(p)
                    }
                }
            }
            other => {
                return Err(Error::config(
                    "transforms",
                    format!("expected a name or an object, got {other}"),
                ))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<TransformSpec> for Value {
    fn from(t: TransformSpec) -> Value {
        let kind = t.short_name();
        match t {
            TransformSpec::GaussianNoise { sigma } => json!({"kind": kind, "sigma": sigma}),
            TransformSpec::GaussianBlur { kernel } => json!({"kind": kind, "kernel": kernel}),
            TransformSpec::ChannelResize { base } => json!({"kind": kind, "base": base}),
            TransformSpec::RandomResizedCrop { min, max } | TransformSpec::TimeOut { min, max } => {
                json!({"kind": kind, "min": min, "max": max})
            }
            TransformSpec::DynamicTimeWarp { warps, radius } => {
                json!({"kind": kind, "warps": warps, "radius": radius})
            }
            TransformSpec::PhysioNoise(p) => {
                let mut v = serde_json::to_value(p).expect("physio params serialize");
                v.as_object_mut()
                    .expect("physio params are an object")
                    .insert("kind".into(), json!(kind));
                v
            }
        }
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every sample.
pub fn gaussian_noise(seg: &Segment, sigma: f64, rng: &mut Rng) -> Result<Segment> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = seg.samples.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(seg.with_samples(out))
}

/// Per-channel convolution with the fixed 5-tap kernel, replicate padding.
pub fn gaussian_blur(seg: &Segment) -> Result<Segment> {
    convolve_replicate(seg, &BLUR_KERNEL)
}

fn convolve_replicate(seg: &Segment, kernel: &[f64]) -> Result<Segment> {
    if kernel.len() % 2 == 0 {
        return Err(Error::invalid("blur kernel must have odd length"));
    }
    let half = (kernel.len() / 2) as isize;
    let n = seg.len() as isize;
    let mut out = Waveform::zeros(seg.n_channels(), seg.len());
    for c in 0..seg.n_channels() {
        let src = seg.samples.channel(c);
        let dst = out.channel_mut(c);
        for (t, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let idx = (t as isize + j as isize - half).clamp(0, n - 1);
                acc += k * src[idx as usize];
            }
            *d = acc;
        }
    }
    Ok(seg.with_samples(out))
}

/// Scales channel `i` by `base^a_i`, `a_i ~ U[-1, 1]`.
pub fn channel_resize(seg: &Segment, base: f64, rng: &mut Rng) -> Result<Segment> {
    if !(base >= 1.0 && base.is_finite()) {
        return Err(Error::invalid(format!(
            "channel resize base must be >= 1, got {base}"
        )));
    }
    let mut out = seg.samples.clone();
    for c in 0..out.n_channels() {
        let a: f64 = rng.gen_range(-1.0..=1.0);
        let factor = base.powf(a);
        for v in out.channel_mut(c) {
            *v *= factor;
        }
    }
    Ok(seg.with_samples(out))
}

/// Linear interpolation `x[i0] + f * (x[i0 + 1] - x[i0])`; exact on constants.
fn interp(x: &[f64], pos: f64) -> f64 {
    let last = x.len() - 1;
    let pos = pos.clamp(0.0, last as f64);
    let i0 = pos.floor() as usize;
    if i0 >= last {
        return x[last];
    }
    let f = pos - i0 as f64;
    x[i0] + f * (x[i0 + 1] - x[i0])
}

/// Crops a fraction `p ~ U[min, max]` at a uniform offset and stretches it
/// back to the original length by linear interpolation.
pub fn random_resized_crop(seg: &Segment, min: f64, max: f64, rng: &mut Rng) -> Result<Segment> {
    if !(0.0 < min && min <= max && max <= 1.0) {
        return Err(Error::invalid(format!(
            "random resized crop needs 0 < l <= m <= 1, got ({min}, {max})"
        )));
    }
    let n = seg.len();
    let p = if min == max {
        min
    } else {
        rng.gen_range(min..=max)
    };
    let crop = ((p * n as f64).round() as usize).clamp(1, n);
    let offset = rng.gen_range(0..=n - crop);
    let mut out = Waveform::zeros(seg.n_channels(), n);
    let step = if n > 1 {
        (crop - 1) as f64 / (n - 1) as f64
    } else {
        0.0
    };
    for c in 0..seg.n_channels() {
        let src = &seg.samples.channel(c)[offset..offset + crop];
        for (j, d) in out.channel_mut(c).iter_mut().enumerate() {
            *d = interp(src, j as f64 * step);
        }
    }
    Ok(seg.with_samples(out))
}

/// Zeroes a span of `round(t * len)` steps, `t ~ U[min, max]`, across all
/// channels at one uniform offset.
pub fn time_out(seg: &Segment, min: f64, max: f64, rng: &mut Rng) -> Result<Segment> {
    if !(0.0 <= min && min <= max && max <= 1.0) {
        return Err(Error::invalid(format!(
            "time out needs 0 <= t_l <= t_u <= 1, got ({min}, {max})"
        )));
    }
    let n = seg.len();
    let t = if min == max {
        min
    } else {
        rng.gen_range(min..=max)
    };
    let span = ((t * n as f64).round() as usize).min(n);
    let mut out = seg.samples.clone();
    if span > 0 {
        let offset = rng.gen_range(0..=n - span);
        for c in 0..out.n_channels() {
            out.channel_mut(c)[offset..offset + span].fill(0.0);
        }
    }
    Ok(seg.with_samples(out))
}

/// Re-times `warps` non-overlapping windows of `2 * radius` steps.
pub fn dynamic_time_warp(
    seg: &Segment,
    warps: usize,
    radius: usize,
    rng: &mut Rng,
) -> Result<Segment> {
    dynamic_time_warp_counted(seg, warps, radius, rng).map(|(s, _)| s)
}

/// As [`dynamic_time_warp`], also returning how many warps were placed.
///
/// Each window `[a - r, a + r]` keeps its endpoints fixed and moves its anchor
/// `a` to `a + d`, `d ~ U[-r/2, r/2]`; the piecewise-linear time map is
/// monotone. Fewer than `warps` windows are placed when no free anchor
/// remains.
pub fn dynamic_time_warp_counted(
    seg: &Segment,
    warps: usize,
    radius: usize,
    rng: &mut Rng,
) -> Result<(Segment, usize)> {
    if radius < 1 {
        return Err(Error::invalid("time warp radius must be >= 1"));
    }
    let n = seg.len();
    let mut anchors: Vec<usize> = Vec::with_capacity(warps);
    for _ in 0..warps {
        if n < 2 * radius + 1 {
            break;
        }
        let free: Vec<usize> = (radius..n - radius)
            .filter(|a| anchors.iter().all(|b| a.abs_diff(*b) >= 2 * radius))
            .collect();
        if free.is_empty() {
            break;
        }
        anchors.push(free[rng.gen_range(0..free.len())]);
    }
    let mut out = seg.samples.clone();
    let r = radius as f64;
    for &a in &anchors {
        let d: f64 = rng.gen_range(-r / 2.0..=r / 2.0);
        let (lo, hi) = (a - radius, a + radius);
        let moved = a as f64 + d;
        for c in 0..out.n_channels() {
            let src = seg.samples.channel(c);
            let dst = out.channel_mut(c);
            for j in lo + 1..hi {
                let pos = if j <= a {
                    lo as f64 + (j - lo) as f64 * (moved - lo as f64) / r
                } else {
                    moved + (j - a) as f64 * (hi as f64 - moved) / r
                };
                dst[j] = interp(src, pos);
            }
        }
    }
    Ok((seg.with_samples(out), anchors.len()))
}

/// Applies the pipeline in list order.
pub fn apply_pipeline(seg: &Segment, pipeline: &[TransformSpec], rng: &mut Rng) -> Result<Segment> {
    let mut cur = seg.clone();
    for t in pipeline {
        cur = t.apply(&cur, rng)?;
    }
    Ok(cur)
}

/// Two views of one segment from independent draws of the same pipeline.
pub fn two_views(
    seg: &Segment,
    pipeline: &[TransformSpec],
    rng: &mut Rng,
) -> Result<(Segment, Segment)> {
    if pipeline.is_empty() {
        return Err(Error::invalid("two_views needs a non-empty pipeline"));
    }
    let a = apply_pipeline(seg, pipeline, rng)?;
    let b = apply_pipeline(seg, pipeline, rng)?;
    Ok((a, b))
}
