//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes on no-grad tapes, so
//! it stays independent of the backward rules it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per input: `max|a - n| / max(max|a|, max|n|, 1e-8)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights
/// so that every output entry contributes a distinct amount.
fn scalarize(tape: &mut Tape, y: Var) -> Result<Var> {
    if tape.value(y).numel() == 1 {
        return Ok(y);
    }
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w: Vec<f64> = (0..tape.value(y).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let s = scalarize(&mut tape, y)?;
    Ok(tape.value(s).item())
}

/// Checks the gradient of `f` with respect to every entry of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let s = scalarize(&mut tape, y)?;
    let grads = tape.backward(s)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut perturbed = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + step;
            let up = evaluate(&f, &perturbed)?;
            perturbed[i].data_mut()[j] = orig - step;
            let down = evaluate(&f, &perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * step);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(1e-8, f64::max);
        if !diff.is_finite() {
            return Err(Error::NonFinite(format!("gradient check of input {i}")));
        }
        relative_errors.push(diff / scale);
    }
    Ok(GradCheckReport { relative_errors })
}

/// Seeded tensor with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape product matches")
}
