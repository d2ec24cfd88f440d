//! Worst-case loss increase inside a parameter ball.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::Objective;
use crate::error::{Error, Result};
use crate::parallel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub base_loss: f64,
    pub sharpness: f64,
    pub radius: f64,
    pub probes: usize,
    pub ascent_steps: usize,
    /// Best increase found by each probe.
    pub per_probe: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn project(eps: &mut [f64], radius: f64) {
    let n = norm(eps);
    if n > radius {
        eps.iter_mut().for_each(|e| *e *= radius / n);
    }
}

fn probe(
    obj: &dyn Objective,
    base: &[f64],
    base_loss: f64,
    radius: f64,
    steps: usize,
    seed: u64,
    k: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let mut eps: Vec<f64> = (0..base.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm(&eps);
    eps.iter_mut().for_each(|e| *e *= radius / n);
    let at = |eps: &[f64]| -> Vec<f64> { base.iter().zip(eps).map(|(b, e)| b + e).collect() };
    let mut best = obj.loss(&at(&eps))? - base_loss;
    for _ in 0..steps {
        let g = obj.grad(&at(&eps))?;
        let gn = norm(&g);
        if gn == 0.0 {
            break;
        }
        // normalised ascent step of twice the radius, then back onto the ball
        eps.iter_mut().zip(&g).for_each(|(e, gi)| *e += 2.0 * radius * gi / gn);
        project(&mut eps, radius);
        best = best.max(obj.loss(&at(&eps))? - base_loss);
    }
    Ok(best)
}

/// Estimates `max_{‖ε‖ ≤ radius} L(w + ε) − L(w)` from seeded random starts
/// on the sphere, each refined by projected normalised-gradient ascent.
///
/// Probe `k` depends only on `(seed, k)`, so adding probes never lowers the
/// estimate and the result does not depend on `threads`.
pub fn sharpness(
    obj: &dyn Objective,
    radius: f64,
    n_probes: usize,
    ascent_steps: usize,
    seed: u64,
    threads: usize,
) -> Result<SharpnessReport> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("ball radius must be positive, got {radius}")));
    }
    if n_probes == 0 {
        return Err(Error::Config("need at least one probe".into()));
    }
    let base = obj.point();
    let base_loss = obj.loss(&base)?;
    let per_probe =
        parallel::map_indexed(n_probes, threads, |k| probe(obj, &base, base_loss, radius, ascent_steps, seed, k))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
    let sharpness = per_probe.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SharpnessReport { base_loss, sharpness, radius, probes: n_probes, ascent_steps, per_probe })
}
