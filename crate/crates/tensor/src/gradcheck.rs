//! Central finite-difference verification of analytic gradients (64-bit).
//!
//! The error for one coordinate is `|analytic - numeric| / max(|analytic|,
//! |numeric|, floor)`; the report keeps the worst coordinate.

use crate::error::Result;
use crate::param::Param;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
}

#[derive(Clone, Debug)]
pub struct Worst {
    pub what: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckCfg {
    pub eps: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Coordinates sampled per tensor (evenly spaced); 0 = all.
    pub per_tensor: usize,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        Self { eps: 1e-6, floor: 1e-6, per_tensor: 24 }
    }
}

impl GradCheckReport {
    fn new() -> Self {
        Self { checked: 0, max_rel_err: 0.0, worst: None }
    }

    fn record(&mut self, what: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some(Worst { what: what.to_string(), index, analytic, numeric });
        }
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
        self
    }
}

fn sample_indices(n: usize, per: usize) -> Vec<usize> {
    if per == 0 || per >= n {
        return (0..n).collect();
    }
    // evenly spaced, offset so the first and last entries are both covered
    (0..per).map(|i| i * (n - 1) / (per - 1).max(1)).collect()
}

/// Checks d f / d inputs, where `f` maps the inputs to a scalar.
pub fn check_inputs(
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[Tensor<f64>],
    cfg: GradCheckCfg,
) -> Result<GradCheckReport> {
    let vars: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().into_var()).collect();
    let out = f(&vars)?;
    let grads = out.backward()?;
    let mut report = GradCheckReport::new();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; v.elem_count()]);
        for i in sample_indices(v.elem_count(), cfg.per_tensor) {
            let eval = |delta: f64| -> Result<f64> {
                let perturbed: Vec<Tensor<f64>> = vars
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            let mut d = t.to_vec();
                            d[i] += delta;
                            Tensor::from_vec(d, t.shape().clone())
                        } else {
                            Ok(t.detach())
                        }
                    })
                    .collect::<Result<_>>()?;
                crate::no_grad(|| f(&perturbed))?.to_scalar()
            };
            let numeric = (eval(cfg.eps)? - eval(-cfg.eps)?) / (2.0 * cfg.eps);
            report.record(&format!("input{k}"), i, analytic[i], numeric, cfg.floor);
        }
    }
    Ok(report)
}

/// Checks d f / d params, where `f` rebuilds the graph from the current
/// parameter values on every call.
pub fn check_params(
    f: impl Fn() -> Result<Tensor<f64>>,
    params: &[Param<f64>],
    cfg: GradCheckCfg,
) -> Result<GradCheckReport> {
    let out = f()?;
    let grads = out.backward()?;
    let mut report = GradCheckReport::new();
    for p in params {
        let base = p.to_vec();
        let analytic = grads.get_id(p.id()).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; base.len()]);
        for i in sample_indices(base.len(), cfg.per_tensor) {
            let eval = |delta: f64| -> Result<f64> {
                let mut d = base.clone();
                d[i] += delta;
                p.set(d)?;
                crate::no_grad(&f)?.to_scalar()
            };
            let plus = eval(cfg.eps)?;
            let minus = eval(-cfg.eps)?;
            p.set(base.clone())?;
            report.record(p.name(), i, analytic[i], (plus - minus) / (2.0 * cfg.eps), cfg.floor);
        }
    }
    Ok(report)
}
