//! Spatial primitives on channel-last images `[N, H, W, C]`. Each linear op
//! is paired with its adjoint so that gradients of gradients stay available.

use crate::autograd::is_grad_enabled;
use crate::error::{invalid, Result, TensorError};
use crate::kernels::{self, PatchGeometry};
use crate::tensor::Tensor;
use crate::{map_storage, map_storage2};

fn nhwc(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[n, h, w, c] => Ok((n, h, w, c)),
        s => Err(invalid(op, format!("expected [N, H, W, C], got {s:?}"))),
    }
}

impl Tensor {
    /// Unfolds `kernel`×`kernel` patches into rows `[N*OH*OW, k*k*C]`.
    pub fn im2col(&self, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
        let (batch, height, width, channels) = nhwc(self, "im2col")?;
        if kernel == 0 || stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(invalid("im2col", "kernel does not fit the padded image"));
        }
        let g = PatchGeometry {
            batch,
            height,
            width,
            channels,
            kernel,
            stride,
            pad,
        };
        self.im2col_geometry(g)
    }

    fn im2col_geometry(&self, g: PatchGeometry) -> Result<Tensor> {
        let storage = map_storage!(self.storage(), v => kernels::im2col(v, &g));
        Tensor::from_op(storage, vec![g.rows(), g.cols()], "im2col", vec![self.clone()], move |grad, _| {
            Ok(vec![Some(grad.col2im(g)?)])
        })
    }

    /// Folds patch rows back into an image, summing overlaps; the adjoint of
    /// [`Tensor::im2col`].
    pub fn col2im(&self, g: PatchGeometry) -> Result<Tensor> {
        if self.shape() != [g.rows(), g.cols()] {
            return Err(TensorError::ShapeMismatch {
                op: "col2im",
                lhs: self.shape().to_vec(),
                rhs: vec![g.rows(), g.cols()],
            });
        }
        let storage = map_storage!(self.storage(), v => kernels::col2im(v, &g));
        Tensor::from_op(
            storage,
            vec![g.batch, g.height, g.width, g.channels],
            "col2im",
            vec![self.clone()],
            move |grad, _| Ok(vec![Some(grad.im2col_geometry(g)?)]),
        )
    }

    /// Sum over non-overlapping 2×2 windows.
    pub fn sum_pool2(&self) -> Result<Tensor> {
        let (n, h, w, c) = nhwc(self, "sum_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("sum_pool2", format!("odd spatial size {h}x{w}")));
        }
        let storage = map_storage!(self.storage(), v => kernels::sum_pool2(v, n, h, w, c));
        Tensor::from_op(storage, vec![n, h / 2, w / 2, c], "sum_pool2", vec![self.clone()], |g, _| {
            Ok(vec![Some(g.upsample2()?)])
        })
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        self.sum_pool2()?.scale(0.25)
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&self) -> Result<Tensor> {
        let (n, h, w, c) = nhwc(self, "upsample2")?;
        let storage = map_storage!(self.storage(), v => kernels::upsample2(v, n, h, w, c));
        Tensor::from_op(storage, vec![n, 2 * h, 2 * w, c], "upsample2", vec![self.clone()], |g, _| {
            Ok(vec![Some(g.sum_pool2()?)])
        })
    }

    /// Bilinear sampling of every image at a shared grid `[OH, OW, 2]` of
    /// (x, y) pixel coordinates; taps outside the image read zero.
    ///
    /// Differentiable with respect to the image (to any order) and the grid
    /// (first order).
    pub fn grid_sample(&self, grid: &Tensor) -> Result<Tensor> {
        let (n, h, w, c) = nhwc(self, "grid_sample")?;
        let (oh, ow) = match grid.shape() {
            &[oh, ow, 2] => (oh, ow),
            s => return Err(invalid("grid_sample", format!("grid must be [OH, OW, 2], got {s:?}"))),
        };
        let storage = map_storage2!(self.storage(), grid.storage(), (img, gr) => kernels::grid_sample(img, gr, n, h, w, c, oh, ow))
            .ok_or(TensorError::DTypeMismatch { op: "grid_sample" })?;
        Tensor::from_op(storage, vec![n, oh, ow, c], "grid_sample", vec![self.clone(), grid.clone()], move |g, inp| {
            let (img, grid) = (&inp[0], &inp[1]);
            let gi = if img.requires_grad_flag() {
                Some(g.grid_sample_adjoint(grid, h, w)?)
            } else {
                None
            };
            let gg = if grid.requires_grad_flag() {
                if is_grad_enabled() {
                    return Err(TensorError::HigherOrderUnsupported("grid_sample (grid)"));
                }
                let s = map_storage!(g.storage(), gv => {
                    let iv = img.typed().expect("same dtype");
                    let grv = grid.typed().expect("same dtype");
                    kernels::grid_sample_grid_grad(gv, iv, grv, n, h, w, c, oh, ow)
                });
                Some(Tensor::from_storage(s, grid.shape())?)
            } else {
                None
            };
            Ok(vec![gi, gg])
        })
    }

    /// Adjoint of [`Tensor::grid_sample`] in the image argument: scatters
    /// `[N, OH, OW, C]` back to `[N, H, W, C]`.
    pub fn grid_sample_adjoint(&self, grid: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (n, oh, ow, c) = nhwc(self, "grid_sample_adjoint")?;
        if grid.shape() != [oh, ow, 2] {
            return Err(invalid("grid_sample_adjoint", "grid does not match sample shape"));
        }
        let storage = map_storage2!(self.storage(), grid.storage(), (gv, gr) => kernels::grid_sample_adjoint(gv, gr, n, h, w, c, oh, ow))
            .ok_or(TensorError::DTypeMismatch { op: "grid_sample_adjoint" })?;
        Tensor::from_op(storage, vec![n, h, w, c], "grid_sample_adjoint", vec![self.clone(), grid.clone()], |g, inp| {
            if inp[1].requires_grad_flag() {
                return Err(TensorError::HigherOrderUnsupported("grid_sample_adjoint (grid)"));
            }
            Ok(vec![Some(g.grid_sample(&inp[1].detach())?), None])
        })
    }
}
