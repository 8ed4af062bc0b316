//! Raw numeric kernels on slices.

/// `c = op(a) * op(b) + beta * c` with `op(a): [m, k]`, `op(b): [k, n]`.
///
/// `a_t` / `b_t` mean the operand is stored transposed (`[k, m]` / `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above pin every slice to exactly the extent the
    // strides address, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a same-padded strided 1-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn t_out(&self) -> usize {
        (self.t_in + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn col_width(&self) -> usize {
        self.c_in * self.kernel
    }
}

/// `x: [batch, c_in, t_in]` to columns `[batch * t_out, c_in * kernel]`.
pub fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (t_out, width, pad) = (g.t_out(), g.col_width(), g.pad() as isize);
    let mut cols = vec![0.0; g.batch * t_out * width];
    for b in 0..g.batch {
        for o in 0..t_out {
            let row = &mut cols[(b * t_out + o) * width..(b * t_out + o + 1) * width];
            let start = (o * g.stride) as isize - pad;
            for c in 0..g.c_in {
                let src = &x[(b * g.c_in + c) * g.t_in..(b * g.c_in + c + 1) * g.t_in];
                for j in 0..g.kernel {
                    let t = start + j as isize;
                    if t >= 0 && (t as usize) < g.t_in {
                        row[c * g.kernel + j] = src[t as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let (t_out, width, pad) = (g.t_out(), g.col_width(), g.pad() as isize);
    let mut x = vec![0.0; g.batch * g.c_in * g.t_in];
    for b in 0..g.batch {
        for o in 0..t_out {
            let row = &cols[(b * t_out + o) * width..(b * t_out + o + 1) * width];
            let start = (o * g.stride) as isize - pad;
            for c in 0..g.c_in {
                let dst = &mut x[(b * g.c_in + c) * g.t_in..(b * g.c_in + c + 1) * g.t_in];
                for j in 0..g.kernel {
                    let t = start + j as isize;
                    if t >= 0 && (t as usize) < g.t_in {
                        dst[t as usize] += row[c * g.kernel + j];
                    }
                }
            }
        }
    }
    x
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sum(exp(xs)))`, shifted by the max.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn gemm_all_transpose_modes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            batch: 2,
            c_in: 3,
            t_in: 9,
            kernel: 5,
            stride: 2,
        };
        assert_eq!(g.t_out(), 5);
        let x: Vec<f64> = (0..2 * 3 * 9).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..2 * 5 * 15).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = im2col(&x, g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
