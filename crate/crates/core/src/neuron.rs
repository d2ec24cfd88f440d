//! Neuron models: rectified-linear units and discrete-time leaky
//! integrate-and-fire dynamics with a piecewise-linear surrogate gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Heaviside step, firing at exactly the threshold (`H(0) = 1`).
#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Triangular surrogate for `dH/du` centred on the threshold.
#[inline]
pub fn surrogate(u_pre: f64, threshold: f64, width: f64) -> f64 {
    (1.0 - (u_pre - threshold).abs() / width).max(0.0)
}

/// Leaky integrate-and-fire parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifParams {
    /// Firing threshold.
    pub u_th: f64,
    /// Membrane time constant in steps; the leak factor is `1 - 1/tau_m`.
    pub tau_m: f64,
    /// Number of simulation steps.
    pub steps: usize,
    /// Half-width of the surrogate derivative's support.
    pub surrogate_width: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self { u_th: 0.5, tau_m: 2.0, steps: 4, surrogate_width: 1.0 }
    }
}

impl LifParams {
    pub fn leak(&self) -> f64 {
        1.0 - 1.0 / self.tau_m
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_m > 1.0 && self.tau_m.is_finite()) {
            return Err(Error::Config(format!("tau_m must exceed 1, got {}", self.tau_m)));
        }
        if self.steps == 0 {
            return Err(Error::Config("LIF needs at least one time step".into()));
        }
        if !(self.u_th > 0.0) || !(self.surrogate_width > 0.0) {
            return Err(Error::Config("u_th and surrogate_width must be positive".into()));
        }
        Ok(())
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// One LIF update: accumulate, fire, hard reset.
///
/// Returns `(u_next, spike)`.
pub fn lif_step(u_prev: &Tensor, input_current: &Tensor, p: &LifParams) -> Result<(Tensor, Tensor)> {
    u_prev.require_same_shape(input_current)?;
    input_current.check_finite("LIF input current")?;
    u_prev.check_finite("LIF membrane potential")?;
    let tau = p.leak();
    let u_pre = u_prev.zip_map(input_current, |u, i| tau * u + i)?;
    let spike = u_pre.map(|u| heaviside(u - p.u_th));
    let u_next = u_pre.zip_map(&spike, |u, s| u * (1.0 - s))?;
    Ok((u_next, spike))
}

/// Elementwise surrogate derivative evaluated at pre-reset potentials.
pub fn surrogate_derivative(u_pre: &Tensor, p: &LifParams) -> Tensor {
    u_pre.map(|u| surrogate(u, p.u_th, p.surrogate_width))
}

/// Unrolled LIF layer driven by one current per step, recorded on a tape.
///
/// The spike inside the reset term is detached, so gradients flow through
/// the pre-reset potential only. Returns the spike trains per step.
pub fn lif_layer_on_tape(tape: &mut Tape, currents: &[Var], p: &LifParams) -> Result<Vec<Var>> {
    let tau = p.leak();
    let mut spikes = Vec::with_capacity(currents.len());
    let mut u: Option<Var> = None;
    for &current in currents {
        let u_pre = match u {
            Some(prev) => {
                let leaked = tape.scale(prev, tau)?;
                tape.add(leaked, current)?
            }
            None => current,
        };
        let s = tape.spike(u_pre, p.u_th, p.surrogate_width)?;
        let s_const = tape.detach(s)?;
        let neg = tape.scale(s_const, -1.0)?;
        let keep = tape.add_scalar(neg, 1.0)?;
        u = Some(tape.mul(u_pre, keep)?);
        spikes.push(s);
    }
    Ok(spikes)
}
