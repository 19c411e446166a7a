//! Central finite-difference verification of backward passes.
//!
//! Checks run in `f64`: with step `h = 1e-5` the truncation and rounding
//! error of a central difference sits well below the `1e-4` relative
//! tolerance used throughout the test suite. The relative error divides by
//! `max(|analytic|, |numeric|, 1e-3)`; the floor keeps near-zero gradients
//! from turning FD noise into spurious failures while still catching a
//! wrong small gradient.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamSet;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(tensor label, flat index, analytic, numeric)` of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl FdReport {
    fn new() -> FdReport {
        FdReport {
            max_rel_err: 0.0,
            checked: 0,
            worst: None,
        }
    }

    fn record(&mut self, label: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = e;
            self.worst = Some((label.to_string(), idx, analytic, numeric));
        }
    }

    pub fn ok(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

/// Checks gradients of a graph over explicit input tensors. `build` gets
/// leaves in input order and must return a scalar loss node.
pub fn check_op_grads(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
) -> Result<FdReport> {
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<VarId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = FdReport::new();
    for (ti, tensor) in inputs.iter().enumerate() {
        for idx in 0..tensor.numel() {
            let orig = work[ti].data()[idx];
            work[ti].data_mut()[idx] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[ti].data_mut()[idx] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[ti].get(idx).copied().unwrap_or(0.0);
            report.record(&format!("input{ti}"), idx, a, numeric);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a model loss. `loss` must run a forward
/// pass and, when the flag is set, also accumulate gradients into the set.
/// `samples_per_tensor` of 0 checks every element.
pub fn check_param_grads(
    set: &mut ParamSet<f64>,
    mut loss: impl FnMut(&mut ParamSet<f64>, bool) -> Result<f64>,
    samples_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FdReport> {
    set.clear_grads();
    loss(set, true)?;
    let analytic: Vec<(String, Vec<f64>)> = set
        .iter()
        .map(|p| {
            let g = p
                .tensor
                .grad
                .as_ref()
                .map(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
            (p.name.clone(), g)
        })
        .collect();
    set.clear_grads();

    let mut report = FdReport::new();
    for pi in 0..analytic.len() {
        let n = analytic[pi].1.len();
        let indices: Vec<usize> = if samples_per_tensor == 0 || samples_per_tensor >= n {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            all.truncate(samples_per_tensor);
            all
        };
        for idx in indices {
            let orig = set.get_at(pi).tensor.data()[idx];
            set.get_at_mut(pi).tensor.data_mut()[idx] = orig + FD_STEP;
            let fp = loss(set, false)?;
            set.get_at_mut(pi).tensor.data_mut()[idx] = orig - FD_STEP;
            let fm = loss(set, false)?;
            set.get_at_mut(pi).tensor.data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            report.record(&analytic[pi].0, idx, analytic[pi].1[idx], numeric);
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[lo, hi)`, the usual FD test input.
pub fn uniform_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}
