//! Central finite-difference checking of tape gradients.
//!
//! The numerical side only ever evaluates forward passes, so it stays
//! independent of the adjoint code it verifies.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Perturbation used by every finite-difference check.
pub const FD_EPSILON: f64 = 1e-3;

/// Pass threshold on the per-element relative error.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-2;

/// `|a − n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    /// Number of (input, element) pairs compared.
    pub checked: usize,
    /// Elements whose ±ε stencil crossed a non-differentiable point (a ReLU
    /// kink, a max-pool winner change, a mask flip); central differences are
    /// meaningless there, so they are excluded from the comparison.
    pub skipped: usize,
    pub worst_rel_err: f64,
    /// Input index and flat element index of the worst comparison.
    pub worst_at: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradReport {
    /// Every compared element is within [`FD_TOLERANCE`] and at least half of
    /// the probed elements were comparable.
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.skipped <= self.checked && self.worst_rel_err < FD_TOLERANCE
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub eps: f64,
    /// Maximum elements probed per input; `None` probes every element.
    pub max_per_input: Option<usize>,
    pub seed: u64,
    /// Operation whose adjoint is deliberately perturbed (negative control).
    pub fault: Option<&'static str>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: FD_EPSILON,
            max_per_input: None,
            seed: 0,
            fault: None,
        }
    }
}

/// Compares the tape gradient of the scalar produced by `build` against
/// central differences for every input (or a seeded sample of elements).
///
/// `build` receives fresh leaf variables for `inputs`, in order, and must
/// return a scalar.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor<f64>], opts: CheckOptions, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(op) = opts.fault {
        tape.inject_adjoint_fault(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let base_signature = tape.branch_signature();
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let eval = |probe: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape.value(loss).item()?, tape.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradReport {
        name: name.into(),
        checked: 0,
        skipped: 0,
        worst_rel_err: 0.0,
        worst_at: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (input_idx, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match opts.max_per_input {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for e in picks {
            let orig = input.data()[e];
            probe[input_idx].data_mut()[e] = orig + opts.eps;
            let (plus, sig_plus) = eval(&probe)?;
            probe[input_idx].data_mut()[e] = orig - opts.eps;
            let (minus, sig_minus) = eval(&probe)?;
            probe[input_idx].data_mut()[e] = orig;
            if sig_plus != base_signature || sig_minus != base_signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[input_idx].data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.worst_rel_err || report.checked == 1 {
                report.worst_rel_err = err;
                report.worst_at = (input_idx, e);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Collapses a tensor output to a scalar through fixed pseudo-random weights so
/// every output element influences the checked gradient.
pub fn random_projection(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_9a7d);
    let weights = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}
