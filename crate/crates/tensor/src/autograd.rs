//! Reverse-mode differentiation over the op graph recorded by [`Tensor`].
//!
//! Every backward rule is itself written in terms of tensor ops, so running a
//! backward pass with graph recording enabled (`create_graph`) produces a
//! differentiable gradient graph. That is what the gradient-matching loss uses
//! for its second-order pass.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub(crate) type BackwardFn = Arc<dyn Fn(&Tensor, &[Tensor]) -> Result<Vec<Option<Tensor>>> + Send + Sync>;

struct Saved {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

pub(crate) struct Node {
    op: &'static str,
    saved: Mutex<Option<Saved>>,
}

impl Node {
    pub(crate) fn new(op: &'static str, inputs: Vec<Tensor>, backward: BackwardFn) -> Node {
        Node {
            op,
            saved: Mutex::new(Some(Saved { inputs, backward })),
        }
    }

    pub(crate) fn op(&self) -> &'static str {
        self.op
    }

    fn inputs(&self) -> Result<Vec<Tensor>> {
        let saved = self.saved.lock().expect("node lock");
        saved
            .as_ref()
            .map(|s| s.inputs.clone())
            .ok_or(TensorError::GraphFreed(self.op))
    }

    fn take_or_clone(&self, retain: bool) -> Result<(Vec<Tensor>, BackwardFn)> {
        let mut saved = self.saved.lock().expect("node lock");
        if retain {
            let s = saved.as_ref().ok_or(TensorError::GraphFreed(self.op))?;
            Ok((s.inputs.clone(), s.backward.clone()))
        } else {
            let s = saved.take().ok_or(TensorError::GraphFreed(self.op))?;
            Ok((s.inputs, s.backward))
        }
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn new(enabled: bool) -> GradModeGuard {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        GradModeGuard { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` without recording any graph nodes.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard::new(false);
    f()
}

/// Non-leaf tensors reachable from `root`, inputs before outputs.
fn topo_order(root: &Tensor) -> Result<Vec<Tensor>> {
    let mut order = Vec::new();
    let Some(node) = root.node() else {
        return Ok(order);
    };
    let mut visited = HashSet::new();
    visited.insert(root.id());
    let mut stack = vec![(root.clone(), node.inputs()?, 0usize)];
    while let Some(top) = stack.last_mut() {
        if top.2 < top.1.len() {
            let child = top.1[top.2].clone();
            top.2 += 1;
            if let Some(child_node) = child.node() {
                if visited.insert(child.id()) {
                    let inputs = child_node.inputs()?;
                    stack.push((child, inputs, 0));
                }
            }
        } else {
            let (t, _, _) = stack.pop().expect("non-empty stack");
            order.push(t);
        }
    }
    Ok(order)
}

fn accumulate(map: &mut HashMap<u64, Tensor>, id: u64, g: Tensor) -> Result<()> {
    let merged = match map.remove(&id) {
        Some(prev) => prev.add(&g)?,
        None => g,
    };
    map.insert(id, merged);
    Ok(())
}

struct Propagated {
    leaves: Vec<Tensor>,
    grads: HashMap<u64, Tensor>,
}

fn propagate(root: &Tensor, retain: bool, create_graph: bool, capture: &HashSet<u64>) -> Result<Propagated> {
    let _mode = GradModeGuard::new(create_graph);
    let order = topo_order(root)?;
    let mut pending: HashMap<u64, Tensor> = HashMap::new();
    let mut done: HashMap<u64, Tensor> = HashMap::new();
    let mut leaves: Vec<Tensor> = Vec::new();
    let seed = Tensor::ones(root.shape(), root.dtype());

    if root.node().is_none() {
        if root.requires_grad_flag() {
            leaves.push(root.clone());
            done.insert(root.id(), seed);
        }
        return Ok(Propagated { leaves, grads: done });
    }
    pending.insert(root.id(), seed);

    for t in order.iter().rev() {
        let Some(g) = pending.remove(&t.id()) else {
            continue;
        };
        if capture.contains(&t.id()) {
            done.insert(t.id(), g.clone());
        }
        let node = t.node().expect("ordered tensors carry nodes");
        let (inputs, backward) = node.take_or_clone(retain)?;
        let input_grads = backward(&g, &inputs)?;
        debug_assert_eq!(input_grads.len(), inputs.len(), "backward arity for {}", node.op());
        for (input, ig) in inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !input.requires_grad_flag() {
                continue;
            }
            if ig.shape() != input.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: node.op(),
                    lhs: ig.shape().to_vec(),
                    rhs: input.shape().to_vec(),
                });
            }
            if input.node().is_some() {
                accumulate(&mut pending, input.id(), ig)?;
            } else {
                if !done.contains_key(&input.id()) {
                    leaves.push(input.clone());
                }
                accumulate(&mut done, input.id(), ig)?;
            }
        }
    }
    Ok(Propagated { leaves, grads: done })
}

impl Tensor {
    /// Accumulates d(self)/d(leaf) into every grad-flagged leaf. Frees the
    /// graph; a second call over the same graph fails with `GraphFreed`.
    pub fn backward(&self) -> Result<()> {
        self.backward_with(false)
    }

    pub fn backward_with(&self, retain_graph: bool) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        let p = propagate(self, retain_graph, false, &HashSet::new())?;
        for leaf in p.leaves {
            let g = p.grads[&leaf.id()].clone();
            leaf.accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// Gradients of scalar `output` with respect to `inputs`, without touching
/// the inputs' accumulated `.grad`. With `create_graph` the returned tensors
/// are themselves differentiable and the forward graph is retained.
pub fn grad(output: &Tensor, inputs: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(TensorError::NonScalarLoss(output.shape().to_vec()));
    }
    let capture: HashSet<u64> = inputs.iter().map(|t| t.id()).collect();
    let p = propagate(output, create_graph, create_graph, &capture)?;
    Ok(inputs
        .iter()
        .map(|t| {
            p.grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape(), t.dtype()))
        })
        .collect())
}
