use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound on the relative-error denominator so that near-zero
/// gradients are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares tape gradients of a scalar function against central
/// differences with step `h`. Returns the largest relative error
/// `|a - n| / max(|a|, |n|, floor)` over all parameter entries.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; params[k].len()]);
        for (j, a) in analytic.iter().enumerate() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::shape("grad_check", format!("output shape {:?} is not scalar", t.shape())));
    }
    Ok(t.item())
}
