//! Central finite-difference checking of analytic gradients.
//!
//! The numeric side evaluates the function forward on f64 inputs that do not
//! track gradients, so it shares no code path with the backward rules it
//! checks unless the function itself calls [`grad`].

use crate::autograd::grad;
use crate::dtype::DType;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// At most this many evenly spaced elements are probed per input.
    pub max_probes: usize,
    /// Elements whose gradient is below `floor_ratio * max|numeric|` are
    /// compared against that floor instead of their own magnitude.
    pub floor_ratio: f64,
    /// Precision of the reverse-mode pass; the numeric side always runs in f64.
    pub analytic_dtype: DType,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            max_probes: 64,
            floor_ratio: 1e-3,
            analytic_dtype: DType::F64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// Compares `∂f/∂inputs` from reverse mode with central differences. Inputs
/// are given in f64; `f` must return a scalar and must not assume a dtype.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if inputs.iter().any(|t| t.dtype() != DType::F64) {
        return Err(invalid("check_gradients", "inputs must be f64"));
    }
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.to_dtype(cfg.analytic_dtype).requires_grad())
        .collect();
    let out = f(&leaves)?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let analytic = grad(&out, &refs, false)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
    };
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let probes = cfg.max_probes.min(n).max(1);
        let stride = (n / probes).max(1);
        let base = input.to_f64_vec();
        let mut numeric = Vec::with_capacity(probes);
        for idx in (0..n).step_by(stride).take(probes) {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[idx] += delta;
                let mut args: Vec<Tensor> = inputs.to_vec();
                args[which] = Tensor::from_f64(v, input.shape())?;
                f(&args)?.item()
            };
            let d = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            numeric.push((idx, d));
        }
        let scale = numeric.iter().map(|(_, d)| d.abs()).fold(0.0, f64::max);
        let floor = (cfg.floor_ratio * scale).max(1e-10);
        let a = analytic[which].to_f64_vec();
        for (idx, d) in numeric {
            let err = (a[idx] - d).abs() / a[idx].abs().max(d.abs()).max(floor);
            report.probes += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = which;
                report.worst_index = idx;
                report.analytic = a[idx];
                report.numeric = d;
            }
        }
    }
    Ok(report)
}
