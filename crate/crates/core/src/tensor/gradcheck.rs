//! Central-difference verification of reverse-mode gradients.

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the autodiff gradient of a scalar-valued graph builder `f`
/// against central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`,
/// returning the max over checked coordinates of
/// `|ad - fd| / max(1, |fd|)`.
///
/// `f` must be pure and deterministic; a non-scalar output is a contract
/// error.
pub fn grad_check<E, F>(f: F, x: &Tensor<E>, h: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Tape<E>, Var) -> Result<Var>,
{
    grad_check_sampled(f, x, h, usize::MAX)
}

/// Like [`grad_check`], but probes at most `max_coords` coordinates,
/// chosen by an even deterministic stride over the flattened input. Full
/// model graphs are far too expensive to difference coordinate by
/// coordinate; a strided subset still touches every region of the input.
pub fn grad_check_sampled<E, F>(f: F, x: &Tensor<E>, h: f64, max_coords: usize) -> Result<f64>
where
    E: Element,
    F: Fn(&mut Tape<E>, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let root = f(&mut tape, leaf)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check expects a scalar-valued function, got output shape {:?}",
            tape.value(root).shape()
        )));
    }
    tape.backward(root)?;
    let analytic: Vec<f64> = match tape.grad(leaf) {
        Some(g) => g.data().iter().map(|v| v.to_f64()).collect(),
        None => vec![0.0; x.numel()],
    };
    drop(tape);

    let n = x.numel();
    let coords: Vec<usize> = if max_coords >= n {
        (0..n).collect()
    } else {
        let stride = (n as f64 / max_coords as f64).max(1.0);
        (0..max_coords)
            .map(|i| ((i as f64 * stride) as usize).min(n - 1))
            .collect()
    };

    let eval = |probe: &Tensor<E>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(probe.clone(), false);
        let root = f(&mut tape, leaf)?;
        Ok(tape.value(root).scalar_value()?.to_f64())
    };

    let mut max_err = 0.0f64;
    let mut probe = x.clone();
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = E::from_f64(orig.to_f64() + h);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = E::from_f64(orig.to_f64() - h);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
