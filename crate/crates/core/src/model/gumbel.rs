//! Gumbel-softmax (concrete) relaxation of categorical sampling.

use rand::distr::Open01;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// `k` i.i.d. standard Gumbel draws, `−ln(−ln u)` with `u ~ Uniform(0, 1)`.
pub fn gumbel_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "gumbel-softmax temperature must be positive, got {tau}"
        )))
    }
}

/// One relaxed sample `softmax((logits + g) / τ)` outside any tape.
pub fn sample_gumbel_softmax<R: Rng + ?Sized>(
    logits: &[f64],
    tau: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let z: Vec<f64> = logits
        .iter()
        .zip(gumbel_noise(logits.len(), rng))
        .map(|(l, g)| (l + g) / tau)
        .collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// Differentiable Gumbel-softmax over the last axis of `logits: [rows, k]`.
/// Row `i` draws its noise from `rngs[i]`.
pub fn gumbel_softmax<R: Rng>(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    rngs: &mut [R],
) -> Result<Var> {
    check_tau(tau)?;
    let shape = tape.value(logits).shape().to_vec();
    let k = *shape.last().expect("rank >= 1");
    let rows = tape.value(logits).len() / k;
    if rows != rngs.len() {
        return Err(Error::dim(format!(
            "gumbel_softmax: {rows} rows but {} generators",
            rngs.len()
        )));
    }
    let noise: Vec<f64> = rngs.iter_mut().flat_map(|r| gumbel_noise(k, r)).collect();
    let noisy = tape.add_const(logits, &Tensor::new(shape, noise)?)?;
    let scaled = tape.scale(noisy, 1.0 / tau);
    Ok(tape.softmax(scaled))
}
