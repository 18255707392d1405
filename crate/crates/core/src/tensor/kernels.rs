//! Scalar compute kernels behind the graph ops. All loops run in a fixed
//! order so results are bit-reproducible.

use super::Element;

/// C[m,n] += A[m,k] @ B[k,n]
pub fn mm_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] @ B[n,k]^T
pub fn mm_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// C[m,n] += A[k,m]^T @ B[k,n]
pub fn mm_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a_row[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

/// Direct 2D convolution (cross-correlation) with zero padding.
pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![T::zero(); d.batch * d.c_out * oh * ow];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let base = (b * d.c_out + co) * oh * ow;
            if let Some(bias) = bias {
                let bv = bias[co];
                for v in &mut out[base..base + oh * ow] {
                    *v = bv;
                }
            }
            for ci in 0..d.c_in {
                let x_base = (b * d.c_in + ci) * d.h * d.w;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = weight[((co * d.c_in + ci) * d.kh + kh) * d.kw + kw];
                        for ho in 0..oh {
                            let hi = (ho * d.stride + kh) as isize - d.pad as isize;
                            if hi < 0 || hi >= d.h as isize {
                                continue;
                            }
                            let x_row = x_base + hi as usize * d.w;
                            let o_row = base + ho * ow;
                            for wo in 0..ow {
                                let wi = (wo * d.stride + kw) as isize - d.pad as isize;
                                if wi < 0 || wi >= d.w as isize {
                                    continue;
                                }
                                out[o_row + wo] += wv * x[x_row + wi as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of conv2d. Returns (d_input, d_weight, d_bias).
pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    d: &ConvDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dx = vec![T::zero(); d.batch * d.c_in * d.h * d.w];
    let mut dw = vec![T::zero(); d.c_out * d.c_in * d.kh * d.kw];
    let mut db = vec![T::zero(); d.c_out];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let g_base = (b * d.c_out + co) * oh * ow;
            for v in &grad_out[g_base..g_base + oh * ow] {
                db[co] += *v;
            }
            for ci in 0..d.c_in {
                let x_base = (b * d.c_in + ci) * d.h * d.w;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let w_idx = ((co * d.c_in + ci) * d.kh + kh) * d.kw + kw;
                        let wv = weight[w_idx];
                        let mut dw_acc = T::zero();
                        for ho in 0..oh {
                            let hi = (ho * d.stride + kh) as isize - d.pad as isize;
                            if hi < 0 || hi >= d.h as isize {
                                continue;
                            }
                            let x_row = x_base + hi as usize * d.w;
                            let g_row = g_base + ho * ow;
                            for wo in 0..ow {
                                let wi = (wo * d.stride + kw) as isize - d.pad as isize;
                                if wi < 0 || wi >= d.w as isize {
                                    continue;
                                }
                                let g = grad_out[g_row + wo];
                                dw_acc += g * x[x_row + wi as usize];
                                dx[x_row + wi as usize] += g * wv;
                            }
                        }
                        dw[w_idx] += dw_acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Group normalization over [B, C, H, W]. Returns (y, mean, rstd) with
/// mean/rstd holding one entry per (batch, group). Variance is biased.
pub fn group_norm_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = channels / groups;
    let group_size = cg * spatial;
    let mut y = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); batch * groups];
    let mut rstds = vec![T::zero(); batch * groups];
    let inv_n = T::from_f64(1.0 / group_size as f64);
    for b in 0..batch {
        for g in 0..groups {
            let start = (b * channels + g * cg) * spatial;
            let xs = &x[start..start + group_size];
            let mut mean = T::zero();
            for &v in xs {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::zero();
            for &v in xs {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let rstd = T::one() / (var + T::from_f64(eps)).sqrt();
            means[b * groups + g] = mean;
            rstds[b * groups + g] = rstd;
            for c_local in 0..cg {
                let c = g * cg + c_local;
                let row = start + c_local * spatial;
                for s in 0..spatial {
                    let xhat = (x[row + s] - mean) * rstd;
                    y[row + s] = gamma[c] * xhat + beta[c];
                }
            }
        }
    }
    (y, means, rstds)
}

/// Gradients of group_norm. Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    grad_out: &[T],
    means: &[T],
    rstds: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = channels / groups;
    let group_size = cg * spatial;
    let inv_n = T::from_f64(1.0 / group_size as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for b in 0..batch {
        for g in 0..groups {
            let start = (b * channels + g * cg) * spatial;
            let mean = means[b * groups + g];
            let rstd = rstds[b * groups + g];
            // First pass: per-channel gamma/beta grads plus the two group sums
            // needed for dx: mean(dxhat) and mean(dxhat * xhat).
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for c_local in 0..cg {
                let c = g * cg + c_local;
                let row = start + c_local * spatial;
                for s in 0..spatial {
                    let go = grad_out[row + s];
                    let xhat = (x[row + s] - mean) * rstd;
                    dgamma[c] += go * xhat;
                    dbeta[c] += go;
                    let dxhat = go * gamma[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let mean_dxhat = sum_dxhat * inv_n;
            let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
            for c_local in 0..cg {
                let c = g * cg + c_local;
                let row = start + c_local * spatial;
                for s in 0..spatial {
                    let xhat = (x[row + s] - mean) * rstd;
                    let dxhat = grad_out[row + s] * gamma[c];
                    dx[row + s] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Softmax along one axis, expressed as (outer, axis, inner) index blocks.
pub fn softmax_forward<T: Element>(x: &[T], outer: usize, axis: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis + a) * inner + i;
            let mut max = x[idx(0)];
            for a in 1..axis {
                let v = x[idx(a)];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for a in 0..axis {
                let e = (x[idx(a)] - max).exp();
                y[idx(a)] = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for a in 0..axis {
                y[idx(a)] *= inv;
            }
        }
    }
    y
}

/// dx = p * (g - sum(g * p)) along the softmax axis.
pub fn softmax_backward<T: Element>(
    probs: &[T],
    grad_out: &[T],
    outer: usize,
    axis: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); probs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * axis + a) * inner + i;
            let mut dot = T::zero();
            for a in 0..axis {
                dot += grad_out[idx(a)] * probs[idx(a)];
            }
            for a in 0..axis {
                dx[idx(a)] = probs[idx(a)] * (grad_out[idx(a)] - dot);
            }
        }
    }
    dx
}
