//! Forward/backward kernels for the non-scan fused nodes.

use ndarray::Array2;

use crate::{Error, Real, Result};

/// Time direction of a depthwise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Left-padded: output at `t` sees frames `t-W+1 ..= t`.
    Causal,
    /// Causal plus anti-causal pass sharing the same taps; output at `t`
    /// sees frames `t-W+1 ..= t+W-1`.  Time reversal commutes with it.
    Symmetric,
}

pub fn rmsnorm_forward<R: Real>(
    x: &Array2<R>,
    gain: &Array2<R>,
    eps: R,
) -> Result<(Array2<R>, Vec<R>)> {
    let (rows, cols) = x.dim();
    if gain.dim() != (1, cols) {
        return Err(Error::shape(
            "rmsnorm",
            format!("gain {:?} for {cols} columns", gain.dim()),
        ));
    }
    crate::mixers::scan::ensure_finite("rmsnorm input", x)?;
    let n = R::of(cols as f64);
    let (gain, x) = (gain.as_standard_layout(), x.as_standard_layout());
    let g = gain.as_slice().expect("standard layout");
    let xs = x.as_slice().expect("standard layout");
    let mut out = vec![R::zero(); rows * cols];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &xs[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|&v| v * v).sum::<R>() / n + eps;
        if !(ms > R::zero()) {
            return Err(Error::NonFinite("rmsnorm: zero mean square with eps = 0".into()));
        }
        let ir = R::one() / ms.sqrt();
        inv.push(ir);
        for c in 0..cols {
            out[r * cols + c] = row[c] * ir * g[c];
        }
    }
    Ok((Array2::from_shape_vec((rows, cols), out).expect("shape"), inv))
}

pub fn rmsnorm_backward<R: Real>(
    x: &Array2<R>,
    gain: &Array2<R>,
    inv_rms: &[R],
    dy: &Array2<R>,
) -> (Array2<R>, Array2<R>) {
    let (rows, cols) = x.dim();
    let n = R::of(cols as f64);
    let xs = x.as_slice().expect("standard layout");
    let g = gain.as_slice().expect("standard layout");
    let dys = dy.as_standard_layout();
    let dys = dys.as_slice().expect("standard layout");
    let mut dx = vec![R::zero(); rows * cols];
    let mut dg = vec![R::zero(); cols];
    for r in 0..rows {
        let ir = inv_rms[r];
        let off = r * cols;
        let mut dot = R::zero();
        for c in 0..cols {
            dot += dys[off + c] * g[c] * xs[off + c];
            dg[c] += dys[off + c] * xs[off + c] * ir;
        }
        let coef = ir * ir * ir * dot / n;
        for c in 0..cols {
            dx[off + c] = ir * g[c] * dys[off + c] - xs[off + c] * coef;
        }
    }
    (
        Array2::from_shape_vec((rows, cols), dx).expect("shape"),
        Array2::from_shape_vec((1, cols), dg).expect("shape"),
    )
}

pub fn l2norm_groups_forward<R: Real>(x: &Array2<R>, group: usize, eps: R) -> (Array2<R>, Vec<R>) {
    let mut out = x.as_standard_layout().into_owned();
    let data = out.as_slice_mut().expect("standard layout");
    let mut norms = Vec::with_capacity(data.len() / group);
    for chunk in data.chunks_mut(group) {
        let n = (chunk.iter().map(|&v| v * v).sum::<R>() + eps).sqrt();
        norms.push(n);
        for v in chunk.iter_mut() {
            *v /= n;
        }
    }
    (out, norms)
}

pub fn l2norm_groups_backward<R: Real>(
    y: &Array2<R>,
    group: usize,
    norms: &[R],
    dy: &Array2<R>,
) -> Array2<R> {
    let dy = dy.as_standard_layout();
    let ys = y.as_slice().expect("standard layout");
    let ds = dy.as_slice().expect("standard layout");
    let mut dx = vec![R::zero(); ys.len()];
    for (i, n) in norms.iter().enumerate() {
        let range = i * group..(i + 1) * group;
        let dot: R = ys[range.clone()]
            .iter()
            .zip(&ds[range.clone()])
            .map(|(&a, &b)| a * b)
            .sum();
        for j in range {
            dx[j] = (ds[j] - ys[j] * dot) / *n;
        }
    }
    Array2::from_shape_vec(y.dim(), dx).expect("shape")
}

pub fn conv_forward<R: Real>(
    x: &Array2<R>,
    kernel: &Array2<R>,
    bias: &Array2<R>,
    mode: ConvMode,
) -> Result<Array2<R>> {
    let (t_len, ch) = x.dim();
    let (kc, width) = kernel.dim();
    if kc != ch || bias.dim() != (1, ch) || width == 0 {
        return Err(Error::shape(
            "conv",
            format!("x {:?}, kernel {:?}, bias {:?}", x.dim(), kernel.dim(), bias.dim()),
        ));
    }
    let (x, kernel, bias) = (
        x.as_standard_layout(),
        kernel.as_standard_layout(),
        bias.as_standard_layout(),
    );
    let xs = x.as_slice().expect("standard layout");
    let ks = kernel.as_slice().expect("standard layout");
    let bs = bias.as_slice().expect("standard layout");
    let mut out = vec![R::zero(); t_len * ch];
    for t in 0..t_len {
        for c in 0..ch {
            let mut acc = bs[c];
            for j in 0..width {
                // tap j sees lag (width - 1 - j)
                let lag = width - 1 - j;
                let w = ks[c * width + j];
                if t >= lag {
                    acc += w * xs[(t - lag) * ch + c];
                }
                if mode == ConvMode::Symmetric && t + lag < t_len {
                    acc += w * xs[(t + lag) * ch + c];
                }
            }
            out[t * ch + c] = acc;
        }
    }
    Ok(Array2::from_shape_vec((t_len, ch), out).expect("shape"))
}

pub fn conv_backward<R: Real>(
    x: &Array2<R>,
    kernel: &Array2<R>,
    dy: &Array2<R>,
    mode: ConvMode,
) -> (Array2<R>, Array2<R>, Array2<R>) {
    let (t_len, ch) = x.dim();
    let width = kernel.ncols();
    let dy = dy.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let ks = kernel.as_slice().expect("standard layout");
    let ds = dy.as_slice().expect("standard layout");
    let mut dx = vec![R::zero(); t_len * ch];
    let mut dk = vec![R::zero(); ch * width];
    let mut db = vec![R::zero(); ch];
    for t in 0..t_len {
        for c in 0..ch {
            let g = ds[t * ch + c];
            db[c] += g;
            for j in 0..width {
                let lag = width - 1 - j;
                let w = ks[c * width + j];
                if t >= lag {
                    let i = (t - lag) * ch + c;
                    dx[i] += g * w;
                    dk[c * width + j] += g * xs[i];
                }
                if mode == ConvMode::Symmetric && t + lag < t_len {
                    let i = (t + lag) * ch + c;
                    dx[i] += g * w;
                    dk[c * width + j] += g * xs[i];
                }
            }
        }
    }
    (
        Array2::from_shape_vec((t_len, ch), dx).expect("shape"),
        Array2::from_shape_vec((ch, width), dk).expect("shape"),
        Array2::from_shape_vec((1, ch), db).expect("shape"),
    )
}

pub fn softmax_rows<R: Real>(x: &Array2<R>) -> Array2<R> {
    let mut out = x.as_standard_layout().into_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: R = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Returns `(log p_target, p_other)` for a two-logit row.
fn two_class_probs<R: Real>(l0: R, l1: R, target: usize) -> (R, R) {
    let (zt, zo) = if target == 0 { (l0, l1) } else { (l1, l0) };
    let m = zt.max(zo);
    let lse = m + ((zt - m).exp() + (zo - m).exp()).ln();
    (zt - lse, (zo - lse).exp())
}

pub fn focal_loss_value<R: Real>(l0: R, l1: R, target: usize, gamma: R, alpha: R) -> R {
    let (log_p, q) = two_class_probs(l0, l1, target);
    let w = if gamma == R::zero() { R::one() } else { q.powf(gamma) };
    -alpha * w * log_p
}

/// Gradient of the focal loss with respect to both logits.
///
/// With two classes `1 - p = q` exactly, so the derivative
/// `∂ℓ/∂z_t = α[γ q^γ p ln p − q^{γ+1}]` has no `(1-p)^{γ-1}` singularity and
/// `∂ℓ/∂z_o = −∂ℓ/∂z_t`.
pub fn focal_loss_grad<R: Real>(l0: R, l1: R, target: usize, gamma: R, alpha: R) -> [R; 2] {
    let (log_p, q) = two_class_probs(l0, l1, target);
    let p = log_p.exp();
    let qg = if gamma == R::zero() { R::one() } else { q.powf(gamma) };
    let gt = alpha * (gamma * qg * p * log_p - qg * q);
    if target == 0 {
        [gt, -gt]
    } else {
        [-gt, gt]
    }
}
