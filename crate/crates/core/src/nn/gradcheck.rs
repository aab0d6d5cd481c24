//! Central finite-difference gradient checking in 64-bit.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of the backward rules it is checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Normwise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, falling back to the
/// absolute error when both gradients vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

fn projected_loss<F>(inputs: &[Tensor<f64>], projection: &mut Option<Tensor<f64>>, seed: u64, f: &F, leaves: bool) -> Result<(Tape<f64>, Vec<Var>, Var), NnError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if leaves { tape.leaf(t.clone()) } else { tape.input(t.clone()) })
        .collect();
    let out = f(&mut tape, &vars)?;
    let proj = projection.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        Tensor::randn(tape.value(out).shape(), 1.0, &mut rng)
    });
    let r = tape.input(proj.clone());
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod)?;
    Ok((tape, vars, loss))
}

/// Compares analytic and central-difference gradients of
/// `sum(f(inputs) ⊙ R)` for a fixed random projection `R`.
///
/// Returns the worst normwise relative error over all inputs.
pub fn check<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<f64, NnError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NnError>,
{
    let mut projection = None;
    let (tape, vars, loss) = projected_loss(inputs, &mut projection, seed, &f, true)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(vars[i]) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; input.len()],
        };
        let mut numeric = Vec::with_capacity(input.len());
        for j in 0..input.len() {
            let eval = |delta: f64| -> Result<f64, NnError> {
                let mut shifted = inputs.to_vec();
                let mut data = shifted[i].data().to_vec();
                data[j] += delta;
                shifted[i] = Tensor::new(input.shape().to_vec(), data)?;
                let (tape, _, loss) = projected_loss(&shifted, &mut projection.clone(), seed, &f, false)?;
                Ok(tape.value(loss).data()[0])
            };
            numeric.push((eval(DEFAULT_STEP)? - eval(-DEFAULT_STEP)?) / (2.0 * DEFAULT_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
