use crate::error::{Result, TensorError};
use crate::kernels;
use crate::map_storage2;
use crate::tensor::Tensor;

impl Tensor {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)`, where `op` transposes when the matching flag is
    /// set. Transposition is folded into the kernel's strides.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() != 2 || other.rank() != 2 {
            return Err(mismatch());
        }
        let (m, k) = if ta { (self.dim(1), self.dim(0)) } else { (self.dim(0), self.dim(1)) };
        let (k2, n) = if tb { (other.dim(1), other.dim(0)) } else { (other.dim(0), other.dim(1)) };
        if k != k2 {
            return Err(mismatch());
        }
        let storage = map_storage2!(self.storage(), other.storage(), (a, b) => kernels::matmul(a, b, m, k, n, ta, tb))
            .ok_or(TensorError::DTypeMismatch { op: "matmul" })?;
        Tensor::from_op(storage, vec![m, n], "matmul", vec![self.clone(), other.clone()], move |g, inp| {
            let (a, b) = (&inp[0], &inp[1]);
            let ga = if a.requires_grad_flag() {
                Some(if ta { b.matmul_t(g, tb, true)? } else { g.matmul_t(b, false, !tb)? })
            } else {
                None
            };
            let gb = if b.requires_grad_flag() {
                Some(if tb { g.matmul_t(a, true, ta)? } else { a.matmul_t(g, !ta, false)? })
            } else {
                None
            };
            Ok(vec![ga, gb])
        })
    }
}
