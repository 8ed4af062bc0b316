//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Values are computed eagerly as ops are recorded; [`Tape::backward`] walks
//! the record in reverse and accumulates gradients by summation. Nodes whose
//! inputs are all gradient-free are skipped.

use crate::error::{Error, Result};
use crate::nn::kernels::{self, col2im, gemm, im2col, ConvGeom};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `[outer, len, inner]` view of a tensor around one axis.
#[derive(Debug, Clone, Copy)]
struct AxisGeom {
    outer: usize,
    len: usize,
    inner: usize,
}

fn axis_geom(shape: &[usize], axis: usize) -> AxisGeom {
    AxisGeom {
        outer: shape[..axis].iter().product(),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Select {
        x: Var,
        index: usize,
        geom: AxisGeom,
    },
    Stack {
        parts: Vec<Var>,
        geom: AxisGeom,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
        geom: AxisGeom,
    },
    MeanAxis {
        x: Var,
        geom: AxisGeom,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    PairDots {
        a: Var,
        b: Var,
        pairs: Vec<(usize, usize)>,
    },
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        geom: AxisGeom,
        batch_stats: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
        c_out: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Statistics used by a batch-norm op.
#[derive(Debug, Clone)]
pub enum BnStats<'a> {
    /// Normalize by the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize by stored running statistics.
    Fixed {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel batch moments computed during a batch-norm op.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape")),
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn rank2(op: &'static str, s: &[usize]) -> Result<(usize, usize)> {
    match s {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::shape(
            op,
            format!("expected a 2-D tensor, got {s:?}"),
        )),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.shape(a))?;
        let (k2, n) = rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rank2("transpose", self.shape(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), ng))
    }

    /// `a[i, j] + b[j]` for `a` of any rank with trailing dimension `n`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(b) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, v) in row.iter_mut().zip(bias) {
                *o += v;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    fn zip_with(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(opname, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::shape(
                "mul_const",
                format!("{} vs {}", c.len(), self.value(a).len()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&c)
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = rank2("slice_cols", self.shape(a))?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&[m, len], out)?,
            Op::SliceCols { x: a, start },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = rank2("concat_cols", self.shape(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (mi, ni) = rank2("concat_cols", self.shape(*p))?;
            if mi != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {m} vs {mi}"),
                ));
            }
            widths.push(ni);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Index `index` along `axis`, removing that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::shape(
                "select",
                format!("index {index} on axis {axis} of {shape:?}"),
            ));
        }
        let g = axis_geom(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(g.outer * g.inner);
        for o in 0..g.outer {
            let base = (o * g.len + index) * g.inner;
            out.extend_from_slice(&src[base..base + g.inner]);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::Select {
                x: a,
                index,
                geom: g,
            },
            ng,
        ))
    }

    /// Stacks equally shaped tensors along a new `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let pshape = self.shape(parts[0]).to_vec();
        for p in parts {
            same_shape("stack", &pshape, self.shape(*p))?;
        }
        let mut oshape = pshape;
        oshape.insert(axis, parts.len());
        let g = axis_geom(&oshape, axis);
        let mut out = vec![0.0; oshape.iter().product()];
        for (k, p) in parts.iter().enumerate() {
            let src = self.value(*p).data();
            for o in 0..g.outer {
                let base = (o * g.len + k) * g.inner;
                out[base..base + g.inner].copy_from_slice(&src[o * g.inner..(o + 1) * g.inner]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::Stack {
                parts: parts.to_vec(),
                geom: g,
            },
            ng,
        ))
    }

    /// Max along `axis`; ties resolve to the first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(
                "max_axis",
                format!("axis {axis} of {shape:?}"),
            ));
        }
        let g = axis_geom(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; g.outer * g.inner];
        let mut argmax = vec![0usize; g.outer * g.inner];
        for o in 0..g.outer {
            for l in 0..g.len {
                for i in 0..g.inner {
                    let v = src[(o * g.len + l) * g.inner + i];
                    let slot = o * g.inner + i;
                    if l == 0 || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = l;
                    }
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::MaxAxis {
                x: a,
                argmax,
                geom: g,
            },
            ng,
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(
                "mean_axis",
                format!("axis {axis} of {shape:?}"),
            ));
        }
        let g = axis_geom(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; g.outer * g.inner];
        for o in 0..g.outer {
            for l in 0..g.len {
                for i in 0..g.inner {
                    out[o * g.inner + i] += src[(o * g.len + l) * g.inner + i];
                }
            }
        }
        let inv = 1.0 / g.len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape;
        oshape.remove(axis);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::MeanAxis { x: a, geom: g },
            ng,
        ))
    }

    /// Rows of a 2-D tensor picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = rank2("gather_rows", self.shape(a))?;
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&[idx.len(), n], out)?,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// `out[p] = dot(a[i], b[j])` for each pair `(i, j)`; `a: [m, d]`,
    /// `b: [n, d]`, output `[pairs.len()]`.
    pub fn pair_dots(&mut self, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (m, d) = rank2("pair_dots", self.shape(a))?;
        let (n, d2) = rank2("pair_dots", self.shape(b))?;
        if d != d2 {
            return Err(Error::shape(
                "pair_dots",
                format!("row widths {d} and {d2}"),
            ));
        }
        if pairs.iter().any(|&(i, j)| i >= m || j >= n) {
            return Err(Error::shape("pair_dots", "pair index out of range"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = pairs
            .iter()
            .map(|&(i, j)| {
                av[i * d..(i + 1) * d]
                    .iter()
                    .zip(&bv[j * d..(j + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&[pairs.len()], out)?,
            Op::PairDots {
                a,
                b,
                pairs: pairs.to_vec(),
            },
            ng,
        ))
    }

    /// Sum over the last axis of a 2-D tensor: `[m, n] -> [m]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rank2("row_sum", self.shape(a))?;
        let src = self.value(a).data();
        let out = (0..m)
            .map(|i| src[i * n..(i + 1) * n].iter().sum())
            .collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&[m], out)?, Op::RowSum(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Batch normalization over channel `axis`; all other axes are pooled.
    ///
    /// Returns the batch moments when normalizing by batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "batch_norm",
                format!("axis {axis} of {shape:?}"),
            ));
        }
        let g = axis_geom(&shape, axis);
        let c = g.len;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine params must be [{c}]"),
            ));
        }
        let count = g.outer * g.inner;
        let src = self.value(x).data();
        let for_each = |f: &mut dyn FnMut(usize, usize)| {
            for o in 0..g.outer {
                for ch in 0..c {
                    for i in 0..g.inner {
                        f(ch, (o * c + ch) * g.inner + i);
                    }
                }
            }
        };
        let (mean, var, eps, moments) = match stats {
            BnStats::Batch { eps } => {
                if count < 2 {
                    return Err(Error::invalid(format!(
                        "batch norm in training mode needs at least 2 values per channel, got {count}"
                    )));
                }
                let mut mean = vec![0.0; c];
                for_each(&mut |ch, k| mean[ch] += src[k]);
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for_each(&mut |ch, k| var[ch] += (src[k] - mean[ch]).powi(2));
                let unbiased = var.iter().map(|v| v / (count - 1) as f64).collect();
                var.iter_mut().for_each(|v| *v /= count as f64);
                let moments = BatchMoments {
                    mean: mean.clone(),
                    var: unbiased,
                    count,
                };
                (mean, var, eps, Some(moments))
            }
            BnStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut x_hat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for_each(&mut |ch, k| {
            let h = (src[k] - mean[ch]) * inv_std[ch];
            x_hat[k] = h;
            out[k] = gam[ch] * h + bet[ch];
        });
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = moments.is_some();
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                geom: g,
                batch_stats,
            },
            ng,
        );
        Ok((v, moments))
    }

    /// Same-padded 1-D convolution, `x: [batch, c_in, t]`, `w: [c_out, c_in, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (b, c_in, t) = match self.shape(x) {
            [b, c, t] => (*b, *c, *t),
            s => {
                return Err(Error::shape(
                    "conv1d",
                    format!("input must be [batch, channels, time], got {s:?}"),
                ))
            }
        };
        let (c_out, k) = match self.shape(w) {
            [o, i, k] if *i == c_in => (*o, *k),
            s => {
                return Err(Error::shape(
                    "conv1d",
                    format!("weight {s:?} for {c_in} input channels"),
                ))
            }
        };
        if k % 2 == 0 || stride == 0 || t == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {k}, stride {stride}, length {t}"),
            ));
        }
        let geom = ConvGeom {
            batch: b,
            c_in,
            t_in: t,
            kernel: k,
            stride,
        };
        let t_out = geom.t_out();
        let cols = im2col(self.value(x).data(), geom);
        let mut y2 = vec![0.0; b * t_out * c_out];
        gemm(
            b * t_out,
            c_in * k,
            c_out,
            &cols,
            false,
            self.value(w).data(),
            true,
            &mut y2,
            0.0,
        );
        let mut out = vec![0.0; b * c_out * t_out];
        for bi in 0..b {
            for o in 0..t_out {
                for co in 0..c_out {
                    out[(bi * c_out + co) * t_out + o] = y2[(bi * t_out + o) * c_out + co];
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            Tensor::new(&[b, c_out, t_out], out)?,
            Op::Conv1d {
                x,
                w,
                cols,
                geom,
                c_out,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy over rows of `logits: [m, n]`.
    ///
    /// Entries flagged in `exclude` (row-major, length `m * n`) are left out of
    /// the softmax; a row's target must not be excluded.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        exclude: Option<&[bool]>,
    ) -> Result<Var> {
        let (m, n) = rank2("cross_entropy", self.shape(logits))?;
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::shape("cross_entropy", "targets must index each row"));
        }
        if let Some(ex) = exclude {
            if ex.len() != m * n || targets.iter().enumerate().any(|(i, &t)| ex[i * n + t]) {
                return Err(Error::invalid("cross_entropy: bad exclusion mask"));
            }
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let keep = |j: usize| exclude.map_or(true, |ex| !ex[i * n + j]);
            let lse = kernels::log_sum_exp((0..n).filter(|&j| keep(j)).map(|j| row[j]));
            for j in 0..n {
                if keep(j) {
                    probs[i * n + j] = (row[j] - lse).exp();
                }
            }
            loss += lse - row[targets[i]];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy with logits over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(logits).data();
        if x.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", x.len(), targets.len()),
            ));
        }
        let loss = x
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / x.len() as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Divides each row of a 2-D tensor by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rank2("l2_normalize_rows", self.shape(a))?;
        let src = self.value(a).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::invalid(format!("zero-norm embedding in row {i}")));
            }
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::L2NormRows { x: a, norms },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("loss variable is not on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gd,
                        false,
                        self.value(*b).data(),
                        true,
                        &mut da,
                        0.0,
                    );
                    accumulate(grads, *a, &[m, k], da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        true,
                        gd,
                        false,
                        &mut db,
                        0.0,
                    );
                    accumulate(grads, *b, &[k, n], db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gd[j * m + i];
                    }
                }
                accumulate(grads, *a, &[m, n], da);
            }
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.shape(), gd.to_vec());
                }
                if self.ng(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, &[n], db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        accumulate(grads, *v, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.shape(), gd.to_vec());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.shape(), gd.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    accumulate(
                        grads,
                        *a,
                        g.shape(),
                        gd.iter().zip(bv).map(|(g, y)| g * y).collect(),
                    );
                }
                if self.ng(*b) {
                    accumulate(
                        grads,
                        *b,
                        g.shape(),
                        gd.iter().zip(av).map(|(g, x)| g * x).collect(),
                    );
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.shape(), gd.iter().map(|v| v * s).collect()),
            Op::AddConst(a) | Op::Reshape(a) => accumulate(grads, *a, self.shape(*a), gd.to_vec()),
            Op::MulConst(a, c) => accumulate(
                grads,
                *a,
                g.shape(),
                gd.iter().zip(c).map(|(g, c)| g * c).collect(),
            ),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, g.shape(), d);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, g.shape(), d);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, g.shape(), d);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = g.shape()[1];
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, &[m, n], dx);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if self.ng(*p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&gd[i * n + off..i * n + off + w]);
                        }
                        accumulate(grads, *p, &[m, w], dp);
                    }
                    off += w;
                }
            }
            Op::Select { x, index, geom } => {
                let mut dx = vec![0.0; geom.outer * geom.len * geom.inner];
                for o in 0..geom.outer {
                    let base = (o * geom.len + index) * geom.inner;
                    dx[base..base + geom.inner]
                        .copy_from_slice(&gd[o * geom.inner..(o + 1) * geom.inner]);
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Stack { parts, geom } => {
                for (k, p) in parts.iter().enumerate() {
                    if !self.ng(*p) {
                        continue;
                    }
                    let mut dp = Vec::with_capacity(geom.outer * geom.inner);
                    for o in 0..geom.outer {
                        let base = (o * geom.len + k) * geom.inner;
                        dp.extend_from_slice(&gd[base..base + geom.inner]);
                    }
                    accumulate(grads, *p, self.shape(*p), dp);
                }
            }
            Op::MaxAxis { x, argmax, geom } => {
                let mut dx = vec![0.0; geom.outer * geom.len * geom.inner];
                for o in 0..geom.outer {
                    for i in 0..geom.inner {
                        let slot = o * geom.inner + i;
                        dx[(o * geom.len + argmax[slot]) * geom.inner + i] += gd[slot];
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::MeanAxis { x, geom } => {
                let inv = 1.0 / geom.len as f64;
                let mut dx = vec![0.0; geom.outer * geom.len * geom.inner];
                for o in 0..geom.outer {
                    for l in 0..geom.len {
                        for i in 0..geom.inner {
                            dx[(o * geom.len + l) * geom.inner + i] = gd[o * geom.inner + i] * inv;
                        }
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::GatherRows { x, idx } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dx[i * n + j] += gd[r * n + j];
                    }
                }
                accumulate(grads, *x, &[m, n], dx);
            }
            Op::PairDots { a, b, pairs } => {
                let (m, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let mut da = vec![0.0; m * d];
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        for (x, y) in da[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&bv[j * d..(j + 1) * d])
                        {
                            *x += gd[p] * y;
                        }
                    }
                    accumulate(grads, *a, &[m, d], da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; n * d];
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        for (y, x) in db[j * d..(j + 1) * d]
                            .iter_mut()
                            .zip(&av[i * d..(i + 1) * d])
                        {
                            *y += gd[p] * x;
                        }
                    }
                    accumulate(grads, *b, &[n, d], db);
                }
            }
            Op::RowSum(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n..(i + 1) * n].fill(gd[i]);
                }
                accumulate(grads, *a, &[m, n], da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, self.shape(*a), vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, self.shape(*a), vec![gd[0] / n as f64; n]);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                geom,
                batch_stats,
            } => {
                let c = geom.len;
                let count = (geom.outer * geom.inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..geom.outer {
                    for ch in 0..c {
                        for i in 0..geom.inner {
                            let k = (o * c + ch) * geom.inner + i;
                            sum_g[ch] += gd[k];
                            sum_gx[ch] += gd[k] * x_hat[k];
                        }
                    }
                }
                if self.ng(*gamma) {
                    accumulate(grads, *gamma, &[c], sum_gx.clone());
                }
                if self.ng(*beta) {
                    accumulate(grads, *beta, &[c], sum_g.clone());
                }
                if self.ng(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for o in 0..geom.outer {
                        for ch in 0..c {
                            let s = gam[ch] * inv_std[ch];
                            for i in 0..geom.inner {
                                let k = (o * c + ch) * geom.inner + i;
                                dx[k] = if *batch_stats {
                                    s * (gd[k] - sum_g[ch] / count - x_hat[k] * sum_gx[ch] / count)
                                } else {
                                    s * gd[k]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, self.shape(*x), dx);
                }
            }
            Op::Conv1d {
                x,
                w,
                cols,
                geom,
                c_out,
            } => {
                let (b, t_out, width) = (geom.batch, geom.t_out(), geom.col_width());
                let mut gy2 = vec![0.0; b * t_out * c_out];
                for bi in 0..b {
                    for co in 0..*c_out {
                        for o in 0..t_out {
                            gy2[(bi * t_out + o) * c_out + co] = gd[(bi * c_out + co) * t_out + o];
                        }
                    }
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; c_out * width];
                    gemm(
                        *c_out,
                        b * t_out,
                        width,
                        &gy2,
                        true,
                        cols,
                        false,
                        &mut dw,
                        0.0,
                    );
                    accumulate(grads, *w, self.shape(*w), dw);
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; b * t_out * width];
                    gemm(
                        b * t_out,
                        *c_out,
                        width,
                        &gy2,
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dcols,
                        0.0,
                    );
                    accumulate(grads, *x, self.shape(*x), col2im(&dcols, *geom));
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let n = self.shape(*logits)[1];
                let m = targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * gd[0] / m).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * n + t] -= gd[0] / m;
                }
                accumulate(grads, *logits, self.shape(*logits), d);
            }
            Op::BceLogits { logits, targets } => {
                let x = self.value(*logits).data();
                let n = x.len() as f64;
                let d = x
                    .iter()
                    .zip(targets)
                    .map(|(x, y)| (kernels::sigmoid(*x) - y) * gd[0] / n)
                    .collect();
                accumulate(grads, *logits, self.shape(*logits), d);
            }
            Op::L2NormRows { x, norms } => {
                let n = self.shape(*x)[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (i, norm) in norms.iter().enumerate() {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
        }
    }
}
