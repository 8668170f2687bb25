use crate::dtype::Storage;
use crate::error::{invalid, Result, TensorError};
use crate::kernels;
use crate::map_storage;
use crate::tensor::{numel_of, Tensor};

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        if numel_of(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op(self.storage().clone(), shape.to_vec(), "reshape", vec![self.clone()], |g, inp| {
            Ok(vec![Some(g.reshape(inp[0].shape())?)])
        })
    }

    /// Collapses all but the leading axis.
    pub fn flatten_rows(&self) -> Result<Tensor> {
        let n = *self.shape().first().ok_or_else(|| invalid("flatten_rows", "rank 0"))?;
        let rest = if n == 0 { 0 } else { self.numel() / n };
        self.reshape(&[n, rest])
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let shape = self.shape().to_vec();
        let mut out = shape.clone();
        out[axis] = len;
        let storage = map_storage!(self.storage(), v => kernels::narrow(v, &shape, axis, start, len));
        let full = shape[axis];
        Tensor::from_op(storage, out, "narrow", vec![self.clone()], move |g, _| {
            Ok(vec![Some(g.pad_narrow(axis, start, full)?)])
        })
    }

    /// Zero-pads along `axis` so that `self` sits at `start` inside length
    /// `full`; the adjoint of [`Tensor::narrow`].
    pub fn pad_narrow(&self, axis: usize, start: usize, full: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + self.shape()[axis] > full {
            return Err(invalid("pad_narrow", "slice does not fit"));
        }
        let shape = self.shape().to_vec();
        let len = shape[axis];
        let mut out = shape.clone();
        out[axis] = full;
        let storage = map_storage!(self.storage(), v => kernels::pad_narrow(v, &shape, axis, start, full));
        Tensor::from_op(storage, out, "pad_narrow", vec![self.clone()], move |g, _| {
            Ok(vec![Some(g.narrow(axis, start, len)?)])
        })
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for p in parts {
            first.expect_same_dtype(p, "concat")?;
            let same_rest = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same_rest {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total += p.shape()[axis];
        }
        let mut out = first.shape().to_vec();
        out[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&out, axis);
        let storage = match first.storage() {
            Storage::F32(_) => {
                let mut v = Vec::with_capacity(numel_of(&out));
                for o in 0..outer {
                    for p in parts {
                        let w = p.shape()[axis] * inner;
                        let src = p.typed::<f32>().expect("dtype checked");
                        v.extend_from_slice(&src[o * w..(o + 1) * w]);
                    }
                }
                Storage::F32(v)
            }
            Storage::F64(_) => {
                let mut v = Vec::with_capacity(numel_of(&out));
                for o in 0..outer {
                    for p in parts {
                        let w = p.shape()[axis] * inner;
                        let src = p.typed::<f64>().expect("dtype checked");
                        v.extend_from_slice(&src[o * w..(o + 1) * w]);
                    }
                }
                Storage::F64(v)
            }
        };
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(storage, out, "concat", parts.to_vec(), move |g, inp| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (len, t) in lens.iter().zip(inp) {
                grads.push(if t.requires_grad_flag() { Some(g.narrow(axis, start, *len)?) } else { None });
                start += len;
            }
            Ok(grads)
        })
    }

    /// Gathers rows (entries of axis 0) by index; repeated indices allowed.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = *self.shape().first().ok_or_else(|| invalid("index_select", "rank 0"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(invalid("index_select", format!("index {bad} >= {rows}")));
        }
        let row_len = if rows == 0 { 0 } else { self.numel() / rows };
        let mut out = self.shape().to_vec();
        out[0] = indices.len();
        let idx = indices.to_vec();
        let storage = map_storage!(self.storage(), v => kernels::index_select_rows(v, row_len, &idx));
        Tensor::from_op(storage, out, "index_select", vec![self.clone()], move |g, _| {
            Ok(vec![Some(g.index_add(&idx, rows)?)])
        })
    }

    /// Scatter-adds rows of `self` into a zero tensor with `rows` rows; the
    /// adjoint of [`Tensor::index_select`].
    pub fn index_add(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        if self.shape().first() != Some(&indices.len()) {
            return Err(invalid("index_add", "one row per index required"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(invalid("index_add", format!("index {bad} >= {rows}")));
        }
        let row_len = if indices.is_empty() { 0 } else { self.numel() / indices.len() };
        let mut out = self.shape().to_vec();
        out[0] = rows;
        let idx = indices.to_vec();
        let storage = map_storage!(self.storage(), v => kernels::index_add_rows(v, row_len, &idx, rows));
        Tensor::from_op(storage, out, "index_add", vec![self.clone()], move |g, _| {
            Ok(vec![Some(g.index_select(&idx)?)])
        })
    }
}
