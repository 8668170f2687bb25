//! Layer-level functions composed from primitive ops.

use crate::dtype::DType;
use crate::error::{invalid, Result, TensorError};
use crate::kernels::PatchGeometry;
use crate::tensor::Tensor;

/// Epsilon for instance and batch normalization.
pub const NORM_EPS: f64 = 1e-5;

/// `x · weight + bias` for `x: [N, in]`, `weight: [in, out]`, `bias: [out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.matmul(weight)?;
    match bias {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// 2-D convolution (cross-correlation) on `[N, H, W, Cin]` with weights laid
/// out as `[k*k*Cin, Cout]` in (ky, kx, cin) row order.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let n = x.dim(0);
    let cols = x.im2col(kernel, stride, pad)?;
    if weight.rank() != 2 || weight.dim(0) != cols.dim(1) {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: cols.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let cout = weight.dim(1);
    let rows = cols.dim(0);
    let (h, w) = (x.dim(1), x.dim(2));
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    debug_assert_eq!(rows, n * oh * ow);
    let y = linear(&cols, weight, bias)?;
    y.reshape(&[n, oh, ow, cout])
}

/// Transposed convolution: the adjoint of [`conv2d`] in its input, with
/// weights `[k*k*Cout, Cin]`. Output size is `(H-1)*stride - 2*pad + kernel`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, h, w, cin) = match x.shape() {
        &[n, h, w, c] => (n, h, w, c),
        s => return Err(invalid("conv_transpose2d", format!("expected NHWC, got {s:?}"))),
    };
    if weight.rank() != 2 || weight.dim(1) != cin || weight.dim(0) % (kernel * kernel) != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let cout = weight.dim(0) / (kernel * kernel);
    let out_h = ((h - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .ok_or_else(|| invalid("conv_transpose2d", "padding larger than output"))?;
    let out_w = ((w - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .ok_or_else(|| invalid("conv_transpose2d", "padding larger than output"))?;
    let geom = PatchGeometry {
        batch: n,
        height: out_h,
        width: out_w,
        channels: cout,
        kernel,
        stride,
        pad,
    };
    if geom.out_height() != h || geom.out_width() != w {
        return Err(invalid("conv_transpose2d", "stride/padding do not invert"));
    }
    let rows = x.reshape(&[n * h * w, cin])?.matmul_t(weight, false, true)?;
    let y = rows.col2im(geom)?;
    match bias {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// Normalizes each (image, channel) plane over its spatial extent.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(invalid("instance_norm", "expected NHWC"));
    }
    normalize_over(x, &[1, 2])
}

/// Normalizes each channel with statistics of the current batch (no running
/// averages). Works on `[N, C]` and `[N, H, W, C]`.
pub fn batch_norm_lite(x: &Tensor) -> Result<Tensor> {
    let axes: Vec<usize> = (0..x.rank().saturating_sub(1)).collect();
    if axes.is_empty() {
        return Err(invalid("batch_norm_lite", "need at least rank 2"));
    }
    normalize_over(x, &axes)
}

fn normalize_over(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let mean = x.mean_axes(axes, true)?;
    let centered = x.sub(&mean)?;
    let var = centered.square()?.mean_axes(axes, true)?;
    centered.div(&var.add_scalar(NORM_EPS)?.sqrt()?)
}

/// Per-channel `x * gamma + beta`.
pub fn affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    x.mul(gamma)?.add(beta)
}

/// Row-wise log-softmax of `[N, K]` logits.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(invalid("log_softmax", "expected [N, K]"));
    }
    let shifted = logits.sub(&logits.max_last_axis()?)?;
    let lse = shifted.exp()?.sum_axes(&[1], true)?.log()?;
    shifted.sub(&lse)
}

/// Constant one-hot matrix `[N, classes]`.
pub fn one_hot(labels: &[usize], classes: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(invalid("one_hot", format!("label {y} >= {classes}")));
        }
        v[i * classes + y] = 1.0;
    }
    Tensor::from_values(&v, &[labels.len(), classes], dtype)
}

/// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() || labels.is_empty() {
        return Err(invalid("cross_entropy", "one label per logit row required"));
    }
    let targets = one_hot(labels, logits.dim(1), logits.dtype())?;
    log_softmax(logits)?.mul(&targets)?.sum()?.scale(-1.0 / labels.len() as f64)
}

/// `‖x‖²` as a scalar.
pub fn squared_l2(x: &Tensor) -> Result<Tensor> {
    x.square()?.sum()
}

/// Row-wise argmax of `[N, K]`.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    let k = x.shape().last().copied().unwrap_or(1).max(1);
    x.to_f64_vec()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
