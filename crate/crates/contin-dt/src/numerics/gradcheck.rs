//! Finite-difference verification of reverse-mode gradients.

use super::tape::{Tape, Value};
use super::tensor::Tensor;
use super::NumericsError;

/// Compares the reverse-mode gradient of a scalar-valued graph against
/// central finite differences, component by component, and returns the
/// largest relative error.
///
/// `build` constructs the loss node from the differentiable input leaf. The
/// finite-difference side re-evaluates the recorded graph in f64, so the
/// reported error measures the f32 backward pass against a high-precision
/// forward reference.
pub fn finite_diff_check<F>(build: F, x: &Tensor, h: f64) -> Result<f32, NumericsError>
where
    F: Fn(&mut Tape, Value) -> Value,
{
    let mut tape = Tape::new();
    let input = tape.input(x);
    let loss = build(&mut tape, input);
    tape.backward(loss)?;
    let analytic = tape
        .grad(input)
        .expect("input unreachable from the loss")
        .to_vec();

    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let f_plus = tape.eval_f64(loss, Some((input, &plus)));
        let f_minus = tape.eval_f64(loss, Some((input, &minus)));
        numeric.push(((f_plus - f_minus) / (2.0 * h)) as f32);
    }

    // Components far below the dominant gradient magnitude are compared at
    // that scale, so machine-level absolute noise on near-zero entries does
    // not masquerade as relative error.
    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0f32, |m, g| m.max(g.abs()));
    let floor = (1e-3 * scale).max(1e-6);
    let mut worst = 0.0f32;
    for (a, n) in analytic.iter().zip(&numeric) {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
