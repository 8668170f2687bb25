use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::autograd::{self, Node};
use crate::dtype::{DType, Element, Storage};
use crate::error::{invalid, Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) storage: Storage,
    pub(crate) requires_grad: bool,
    pub(crate) node: Option<Node>,
    pub(crate) grad: Mutex<Option<Tensor>>,
}

/// Immutable dense tensor. Cloning is cheap and shares the buffer.
///
/// A tensor either is a leaf (created directly, optionally flagged with
/// [`Tensor::requires_grad`]) or the output of a recorded op whose node links
/// back to its inputs.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_storage(storage: Storage, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != storage.len() {
            return Err(invalid(
                "from_storage",
                format!("shape {:?} needs {} values, got {}", shape, numel_of(shape), storage.len()),
            ));
        }
        Ok(Tensor::leaf(storage, shape.to_vec(), false))
    }

    pub fn from_vec(values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_storage(Storage::F32(values), shape)
    }

    pub fn from_f64(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_storage(Storage::F64(values), shape)
    }

    /// Builds a tensor of `dtype` from f64 values (rounding when `dtype` is f32).
    pub fn from_values(values: &[f64], shape: &[usize], dtype: DType) -> Result<Tensor> {
        Tensor::from_storage(Storage::from_f64(dtype, values), shape)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::leaf(Storage::zeros(dtype, numel_of(shape)), shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Tensor {
        let n = numel_of(shape);
        let storage = match dtype {
            DType::F32 => Storage::F32(vec![value as f32; n]),
            DType::F64 => Storage::F64(vec![value; n]),
        };
        Tensor::leaf(storage, shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::full(shape, 1.0, dtype)
    }

    pub fn scalar(value: f64, dtype: DType) -> Tensor {
        Tensor::full(&[], value, dtype)
    }

    pub(crate) fn leaf(storage: Storage, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            storage,
            requires_grad,
            node: None,
            grad: Mutex::new(None),
        }))
    }

    pub(crate) fn with_node(storage: Storage, shape: Vec<usize>, node: Option<Node>) -> Tensor {
        Tensor(Arc::new(Inner {
            id: next_id(),
            shape,
            requires_grad: node.is_some(),
            storage,
            node,
            grad: Mutex::new(None),
        }))
    }

    /// Records the result of op `op`. A graph node is attached only when grad
    /// mode is on and some input participates in differentiation.
    pub(crate) fn from_op<F>(
        storage: Storage,
        shape: Vec<usize>,
        op: &'static str,
        inputs: Vec<Tensor>,
        backward: F,
    ) -> Result<Tensor>
    where
        F: Fn(&Tensor, &[Tensor]) -> Result<Vec<Option<Tensor>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(numel_of(&shape), storage.len());
        if !storage.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let track = autograd::is_grad_enabled() && inputs.iter().any(|t| t.requires_grad_flag());
        let node = track.then(|| Node::new(op, inputs, Arc::new(backward)));
        Ok(Tensor::with_node(storage, shape, node))
    }

    /// Returns a fresh leaf sharing this tensor's values that participates in
    /// differentiation.
    pub fn requires_grad(&self) -> Tensor {
        Tensor::leaf(self.0.storage.clone(), self.0.shape.clone(), true)
    }

    /// Returns a fresh leaf with the same values and no graph history.
    pub fn detach(&self) -> Tensor {
        if self.0.node.is_none() && !self.0.requires_grad {
            return self.clone();
        }
        Tensor::leaf(self.0.storage.clone(), self.0.shape.clone(), false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.storage.len()
    }

    pub fn dtype(&self) -> DType {
        self.0.storage.dtype()
    }

    pub fn storage(&self) -> &Storage {
        &self.0.storage
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.0.node.as_ref()
    }

    pub fn typed<T: Element>(&self) -> Option<&[T]> {
        T::view(&self.0.storage)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.storage.to_f64_vec()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.0.storage {
            Storage::F32(v) => v.clone(),
            Storage::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(invalid("item", format!("expected one element, shape {:?}", self.shape())));
        }
        Ok(self.to_f64_vec()[0])
    }

    /// Value at a flat row-major position.
    pub fn get(&self, index: usize) -> f64 {
        match &self.0.storage {
            Storage::F32(v) => v[index] as f64,
            Storage::F64(v) => v[index],
        }
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.detach();
        }
        Tensor::leaf(self.0.storage.cast(dtype), self.0.shape.clone(), false)
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: Tensor) -> Result<()> {
        let mut slot = self.0.grad.lock().expect("grad lock");
        let merged = match slot.take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        };
        *slot = Some(merged);
        Ok(())
    }

    /// Bitwise equality of shape, dtype and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        if self.shape() != other.shape() {
            return false;
        }
        match (&self.0.storage, &other.0.storage) {
            (Storage::F32(a), Storage::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (Storage::F64(a), Storage::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            _ => false,
        }
    }

    pub(crate) fn expect_same_dtype(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.dtype() != other.dtype() {
            return Err(TensorError::DTypeMismatch { op });
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let values = self.to_f64_vec();
        let preview: Vec<f64> = values.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor({:?}, {}, grad={}, {:?}{})",
            self.shape(),
            self.dtype().name(),
            self.requires_grad_flag(),
            preview,
            if values.len() > 8 { " ..." } else { "" }
        )
    }
}
