use crate::error::{invalid, Result, TensorError};
use crate::kernels;
use crate::map_storage;
use crate::tensor::{numel_of, Tensor};

impl Tensor {
    /// Sums over `axes`. With `keepdim` the reduced axes stay as size 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let rank = self.rank();
        let mut reduce = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(invalid("sum_axes", format!("axis {a} out of range for rank {rank}")));
            }
            reduce[a] = true;
        }
        let kept: Vec<usize> = self
            .shape()
            .iter()
            .zip(&reduce)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            self.shape()
                .iter()
                .zip(&reduce)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect()
        };
        let shape = self.shape().to_vec();
        let storage = map_storage!(self.storage(), v => kernels::reduce_sum(v, &shape, &reduce));
        Tensor::from_op(storage, out_shape, "sum", vec![self.clone()], move |g, inp| {
            Ok(vec![Some(g.reshape(&kept)?.broadcast_to(inp[0].shape())?)])
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        if count == 0 {
            return Err(invalid("mean", "empty reduction"));
        }
        self.sum_axes(axes, keepdim)?.scale(1.0 / count as f64)
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// Repeats values along broadcast dimensions to reach `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        match kernels::broadcast_shape(self.shape(), shape) {
            Some(out) if out == shape => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: self.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let src = self.shape().to_vec();
        let storage = map_storage!(self.storage(), v => kernels::expand(v, &src, shape));
        Tensor::from_op(storage, shape.to_vec(), "broadcast_to", vec![self.clone()], move |g, inp| {
            Ok(vec![Some(g.sum_to(inp[0].shape())?)])
        })
    }

    /// Sums broadcast dimensions away so the result has `shape`; the adjoint
    /// of [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let rank = self.rank();
        if shape.len() > rank {
            return Err(TensorError::ShapeMismatch {
                op: "sum_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let pad = rank - shape.len();
        let mut axes = Vec::new();
        for d in 0..rank {
            if d < pad {
                axes.push(d);
            } else if shape[d - pad] == 1 && self.shape()[d] != 1 {
                axes.push(d);
            } else if shape[d - pad] != self.shape()[d] {
                return Err(TensorError::ShapeMismatch {
                    op: "sum_to",
                    lhs: self.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
        }
        self.sum_axes(&axes, true)?.reshape(shape)
    }

    /// Row-wise maximum over the last axis, keepdim, without gradient history.
    pub fn max_last_axis(&self) -> Result<Tensor> {
        let inner = *self.shape().last().ok_or_else(|| invalid("max_last_axis", "rank 0"))?;
        if inner == 0 {
            return Err(invalid("max_last_axis", "empty axis"));
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = 1;
        let storage = map_storage!(self.storage(), v => kernels::max_last_axis(v, inner));
        debug_assert_eq!(storage.len(), numel_of(&shape));
        Ok(Tensor::leaf(storage, shape, false))
    }
}
