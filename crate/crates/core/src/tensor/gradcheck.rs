use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares tape gradients of `f` (summed over its output) against central
/// differences. Returns the max over all parameter entries of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data().iter().sum())
    };
    let analytic = |ps: &[Tensor<f64>]| -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out);
        Ok(vars
            .iter()
            .zip(ps)
            .map(|(&v, p)| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.len()])
            })
            .collect())
    };
    compare_gradients(eval, analytic, params, FD_STEP)
}

/// Lower-level form of [`grad_check`] taking the value and gradient
/// functions separately.
pub fn compare_gradients<V, G>(value: V, analytic: G, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    V: Fn(&[Tensor<f64>]) -> Result<f64>,
    G: Fn(&[Tensor<f64>]) -> Result<Vec<Vec<f64>>>,
{
    let grads = analytic(params)?;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, g) in grads.iter().enumerate() {
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = value(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let down = value(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (g[e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
