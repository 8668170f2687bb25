//! First-order optimizers that rebuild parameter leaves in place.

use crate::dtype::{Element, Storage};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

#[derive(Debug, Clone)]
struct Slot {
    shape: Vec<usize>,
    first: Storage,
    second: Option<Storage>,
}

/// Optimizer hyper-parameters plus per-parameter moment buffers.
///
/// Buffers are created on the first update and bound to the order of the
/// parameter slice; later calls must pass parameters in the same order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    step: u64,
    slots: Vec<Slot>,
}

impl OptimizerState {
    pub fn adam(lr: f64) -> OptimizerState {
        OptimizerState::adam_with(lr, 0.9, 0.999, 1e-8)
    }

    pub fn adam_with(lr: f64, beta1: f64, beta2: f64, eps: f64) -> OptimizerState {
        OptimizerState {
            kind: OptimizerKind::Adam { beta1, beta2, eps },
            lr,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> OptimizerState {
        OptimizerState {
            kind: OptimizerKind::Sgd { momentum },
            lr,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update of whichever kind this state holds.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        match self.kind {
            OptimizerKind::Adam { .. } => self.adam_step(params, grads),
            OptimizerKind::Sgd { .. } => self.sgd_step(params, grads),
        }
    }

    /// Updates from each parameter's accumulated `.grad`; parameters without
    /// a gradient are treated as having a zero gradient.
    pub fn step_accumulated(&mut self, params: &mut [Tensor]) -> Result<()> {
        let grads: Vec<Tensor> = params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(p.shape(), p.dtype())))
            .collect();
        self.step(params, &grads)
    }

    fn prepare(&mut self, params: &[Tensor], grads: &[Tensor], second: bool) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Optimizer(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            p.expect_same_dtype(g, "optimizer")?;
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot {
                    shape: p.shape().to_vec(),
                    first: Storage::zeros(p.dtype(), p.numel()),
                    second: second.then(|| Storage::zeros(p.dtype(), p.numel())),
                })
                .collect();
        }
        if self.slots.len() != params.len()
            || self.slots.iter().zip(params).any(|(s, p)| s.shape != p.shape() || s.first.dtype() != p.dtype())
        {
            return Err(TensorError::Optimizer("parameter list changed between steps".into()));
        }
        self.step = self
            .step
            .checked_add(1)
            .ok_or_else(|| TensorError::Optimizer("step counter overflow".into()))?;
        Ok(())
    }

    /// Adam with bias correction.
    pub fn adam_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let OptimizerKind::Adam { beta1, beta2, eps } = self.kind else {
            return Err(TensorError::Optimizer("adam_step on a non-Adam state".into()));
        };
        self.prepare(params, grads, true)?;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = self.lr;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.slots.iter_mut()) {
            let second = slot.second.as_mut().expect("adam slots carry second moments");
            let updated = match (p.storage(), g.storage()) {
                (Storage::F32(pv), Storage::F32(gv)) => Storage::F32(adam_update(
                    pv,
                    gv,
                    f32::view_mut(&mut slot.first).expect("dtype"),
                    f32::view_mut(second).expect("dtype"),
                    [lr, beta1, beta2, eps, c1, c2],
                )),
                (Storage::F64(pv), Storage::F64(gv)) => Storage::F64(adam_update(
                    pv,
                    gv,
                    f64::view_mut(&mut slot.first).expect("dtype"),
                    f64::view_mut(second).expect("dtype"),
                    [lr, beta1, beta2, eps, c1, c2],
                )),
                _ => return Err(TensorError::DTypeMismatch { op: "adam_step" }),
            };
            *p = rebuild(updated, p)?;
        }
        Ok(())
    }

    /// Plain or heavy-ball SGD: `buf = momentum * buf + g`, `θ -= lr * buf`.
    pub fn sgd_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let OptimizerKind::Sgd { momentum } = self.kind else {
            return Err(TensorError::Optimizer("sgd_step on a non-SGD state".into()));
        };
        self.prepare(params, grads, false)?;
        let first_step = self.step == 1;
        let lr = self.lr;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.slots.iter_mut()) {
            let updated = match (p.storage(), g.storage()) {
                (Storage::F32(pv), Storage::F32(gv)) => Storage::F32(sgd_update(
                    pv,
                    gv,
                    f32::view_mut(&mut slot.first).expect("dtype"),
                    lr,
                    momentum,
                    first_step,
                )),
                (Storage::F64(pv), Storage::F64(gv)) => Storage::F64(sgd_update(
                    pv,
                    gv,
                    f64::view_mut(&mut slot.first).expect("dtype"),
                    lr,
                    momentum,
                    first_step,
                )),
                _ => return Err(TensorError::DTypeMismatch { op: "sgd_step" }),
            };
            *p = rebuild(updated, p)?;
        }
        Ok(())
    }
}

fn rebuild(storage: Storage, like: &Tensor) -> Result<Tensor> {
    if !storage.all_finite() {
        return Err(TensorError::NonFinite { op: "optimizer" });
    }
    let t = Tensor::from_storage(storage, like.shape())?;
    Ok(if like.requires_grad_flag() { t.requires_grad() } else { t })
}

fn adam_update<T: Element>(p: &[T], g: &[T], m: &mut [T], v: &mut [T], h: [f64; 6]) -> Vec<T> {
    // arithmetic in f64; moments are stored at the parameter's precision
    let [lr, b1, b2, eps, c1, c2] = h;
    let f = |x: T| x.to_f64().expect("finite");
    p.iter()
        .zip(g)
        .zip(m.iter_mut().zip(v.iter_mut()))
        .map(|((&theta, &grad), (mi, vi))| {
            let gr = f(grad);
            let m_new = b1 * f(*mi) + (1.0 - b1) * gr;
            let v_new = b2 * f(*vi) + (1.0 - b2) * gr * gr;
            *mi = T::lit(m_new);
            *vi = T::lit(v_new);
            T::lit(f(theta) - lr * (m_new / c1) / ((v_new / c2).sqrt() + eps))
        })
        .collect()
}

fn sgd_update<T: Element>(p: &[T], g: &[T], buf: &mut [T], lr: f64, momentum: f64, first: bool) -> Vec<T> {
    let lr = T::lit(lr);
    let mu = T::lit(momentum);
    p.iter()
        .zip(g)
        .zip(buf.iter_mut())
        .map(|((&theta, &grad), b)| {
            let step = if momentum == 0.0 {
                grad
            } else {
                *b = if first { grad } else { mu * *b + grad };
                *b
            };
            theta - lr * step
        })
        .collect()
}
