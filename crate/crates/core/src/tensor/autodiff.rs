//! Program evaluation, gradient extraction, and the finite-difference
//! oracle used to validate backward passes.
//!
//! A "program" is any closure that records operations on a fresh [`Tape`]
//! and returns the scalar output node. Parameters are bound by name so the
//! same program can be re-evaluated at perturbed parameter values, which is
//! what [`finite_difference`] does.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tape, Tensor, Value};

/// Named parameter leaves bound onto a tape, in lexicographic name order.
pub struct BoundParams {
    values: BTreeMap<String, Value>,
}

impl BoundParams {
    /// Binds every tensor in `params` as a differentiable leaf.
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let v = tape.param(tensor)?;
            values.insert(name.to_string(), v);
        }
        Ok(BoundParams { values })
    }

    /// Tape node for a parameter, by name.
    pub fn get(&self, name: &str) -> Result<Value> {
        self.values
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))
    }
}

/// A differentiable scalar program over named parameters and positional
/// constant inputs.
pub trait Program {
    fn record(&self, tape: &mut Tape, params: &BoundParams, inputs: &[Value]) -> Result<Value>;
}

impl<F> Program for F
where
    F: Fn(&mut Tape, &BoundParams, &[Value]) -> Result<Value>,
{
    fn record(&self, tape: &mut Tape, params: &BoundParams, inputs: &[Value]) -> Result<Value> {
        self(tape, params, inputs)
    }
}

fn run<P: Program>(
    program: &P,
    params: &ParamSet,
    inputs: &[Tensor],
) -> Result<(Tape, BoundParams, Value)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params)?;
    let input_values: Vec<Value> = inputs
        .iter()
        .map(|t| tape.input(t))
        .collect::<Result<_>>()?;
    let out = program.record(&mut tape, &bound, &input_values)?;
    let (r, c) = tape.shape(out);
    if (r, c) != (1, 1) {
        return Err(Error::invalid(format!(
            "program output must be a scalar, got ({r}, {c})"
        )));
    }
    Ok((tape, bound, out))
}

/// Forward-evaluates a scalar program.
pub fn evaluate<P: Program>(program: &P, params: &ParamSet, inputs: &[Tensor]) -> Result<f64> {
    let (tape, _, out) = run(program, params, inputs)?;
    Ok(tape.value(out)[0])
}

/// Forward-evaluates a scalar program and returns its value together with
/// the gradient of every parameter, shaped like `params`.
pub fn evaluate_with_gradients<P: Program>(
    program: &P,
    params: &ParamSet,
    inputs: &[Tensor],
) -> Result<(f64, ParamSet)> {
    let (tape, bound, out) = run(program, params, inputs)?;
    let value = tape.value(out)[0];
    let adjoints = tape.backward(out)?;
    let mut grads = ParamSet::new();
    for (name, tensor) in params.iter() {
        let v = bound.get(name)?;
        let g = match &adjoints[v.0] {
            Some(buf) => Tensor::new(tensor.shape(), buf.clone())?,
            None => Tensor::zeros(tensor.shape())?,
        };
        grads.insert(name, g)?;
    }
    Ok((value, grads))
}

/// Central-difference gradient oracle: independently re-evaluates the
/// program at `p ± step` for every parameter element. Intended for tests;
/// cost scales with parameter count.
pub fn finite_difference<P: Program>(
    program: &P,
    params: &ParamSet,
    inputs: &[Tensor],
    step: f64,
) -> Result<ParamSet> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid("finite_difference step must be positive"));
    }
    // Validate scalar output up front so a bad program fails fast.
    let _ = evaluate(program, params, inputs)?;
    let mut grads = ParamSet::new();
    for (name, tensor) in params.iter() {
        let mut g = vec![0.0; tensor.len()];
        for idx in 0..tensor.len() {
            let perturb = |delta: f64| -> Result<f64> {
                let mut data = tensor.data().to_vec();
                data[idx] += delta;
                let shifted = Tensor::new(tensor.shape(), data)?;
                let mut p2 = params.clone();
                p2.set(name, shifted)?;
                evaluate(program, &p2, inputs)
            };
            let plus = perturb(step)?;
            let minus = perturb(-step)?;
            g[idx] = (plus - minus) / (2.0 * step);
        }
        grads.insert(name, Tensor::new(tensor.shape(), g)?)?;
    }
    Ok(grads)
}
