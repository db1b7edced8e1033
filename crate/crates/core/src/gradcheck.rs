//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Absolute floor of the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of a scalar function against central finite
/// differences at `x` with step `h`, returning the worst relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = tape_gradient(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Gradient of `f` at `x` from a single backward pass.
pub fn tape_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    Ok(grads.get_or_zeros(&tape, xv))
}

/// [`grad_check`] for a function of several tensors, all perturbed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let flat: Vec<f64> = inputs
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let packed = Tensor::new(&[flat.len()], flat)?;
    let unpack = |tape: &mut Tape, x: Var| -> Result<Var> {
        let mut parts = Vec::with_capacity(inputs.len());
        let mut at = 0;
        for t in inputs {
            let piece = tape.slice_rows(x, at, t.numel())?;
            parts.push(tape.reshape(piece, t.shape())?);
            at += t.numel();
        }
        f(tape, &parts)
    };
    grad_check(unpack, &packed, h)
}

/// Worst relative error over every coordinate of every parameter in `params`
/// for a scalar function built through a [`Binder`].
pub fn param_grad_check<F>(f: F, params: &ParamSet, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<Var>,
{
    Ok(param_grad_errors(f, params, h)?
        .into_iter()
        .map(|(_, e)| e)
        .fold(0.0, f64::max))
}

/// Per-parameter worst relative error, in parameter order.
pub fn param_grad_errors<F>(f: F, params: &ParamSet, h: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let out = f(&mut tape, &mut binder)?;
    let analytic = binder.gradients(&tape.backward(out)?);
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(p);
        let out = f(&mut tape, &mut binder)?;
        Ok(tape.value(out).item())
    };
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (name, value) in params.iter() {
        let grad = analytic.get(name);
        let mut worst = 0.0f64;
        for i in 0..value.numel() {
            let orig = value.data()[i];
            let slot =
                |p: &mut ParamSet, v: f64| p.get_mut(name).expect("same names").data_mut()[i] = v;
            slot(&mut probe, orig + h);
            let up = eval(&probe)?;
            slot(&mut probe, orig - h);
            let down = eval(&probe)?;
            slot(&mut probe, orig);
            let numeric = (up - down) / (2.0 * h);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        out.push((name.to_string(), worst));
    }
    Ok(out)
}

fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}
