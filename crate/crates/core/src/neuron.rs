//! Discrete-time leaky integrate-and-fire (LIF) and leaky integrate (LI)
//! neuron dynamics.
//!
//! One LIF step:
//!
//! ```text
//! H_t = V_{t-1} + (1/tau) * (-(V_{t-1} - V_reset) + X_t)   charge
//! S_t = Heaviside(H_t - V_th), Heaviside(0) = 1          fire
//! V_t = H_t * (1 - S_t) + V_reset * S_t                  reset
//! ```
//!
//! The LI neuron is the same charge equation with an infinite threshold: it
//! never fires and `V_t = H_t`. Every state starts at `V_0 = V_reset`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronConfig {
    /// Membrane time constant, strictly greater than 1.
    pub tau: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self { tau: 2.0, v_threshold: 1.0, v_reset: 0.0 }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 1.0) {
            return Err(Error::Config(format!("tau must be finite and > 1, got {}", self.tau)));
        }
        if !self.v_reset.is_finite() {
            return Err(Error::Config("v_reset must be finite".into()));
        }
        if self.v_threshold.is_nan() || self.v_threshold <= self.v_reset {
            return Err(Error::Config(format!(
                "v_threshold ({}) must exceed v_reset ({})",
                self.v_threshold, self.v_reset
            )));
        }
        Ok(())
    }

    /// Per-step voltage retention `1 - 1/tau`.
    pub fn leak(&self) -> f64 {
        1.0 - 1.0 / self.tau
    }
}

/// Neuron model attached to a synaptic layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronModel {
    Lif,
    Li,
}

/// Membrane quantities for a population of neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState<F> {
    /// Voltage after reset, `V_t`.
    pub v: Vec<F>,
    /// Voltage after charging and before reset, `H_t`.
    pub h: Vec<F>,
    /// Spike output `S_t`; always zero for LI neurons.
    pub s: Vec<F>,
}

impl<F: Real> NeuronState<F> {
    /// Resting population: `V = H = V_reset`, no spikes.
    pub fn rest(len: usize, cfg: &NeuronConfig) -> Self {
        let vr = F::of(cfg.v_reset);
        Self { v: vec![vr; len], h: vec![vr; len], s: vec![F::zero(); len] }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    fn check(&self, x: &[F]) -> Result<()> {
        ensure_len("neuron state h", self.h.len(), self.v.len())?;
        ensure_len("neuron state s", self.s.len(), self.v.len())?;
        ensure_len("neuron input", x.len(), self.v.len())
    }
}

#[inline]
pub(crate) fn charge<F: Real>(v: F, x: F, inv_tau: F, v_reset: F) -> F {
    v + inv_tau * (-(v - v_reset) + x)
}

#[inline]
pub(crate) fn heaviside<F: Real>(margin: F) -> F {
    if margin >= F::zero() {
        F::one()
    } else {
        F::zero()
    }
}

/// One LIF step.
pub fn lif_step<F: Real>(state: &NeuronState<F>, x: &[F], cfg: &NeuronConfig) -> Result<NeuronState<F>> {
    state.check(x)?;
    let mut next = state.clone();
    lif_update(&mut next, x, cfg);
    Ok(next)
}

/// One LI step. The returned `h` equals `v` and `s` stays zero.
pub fn li_step<F: Real>(state: &NeuronState<F>, x: &[F], cfg: &NeuronConfig) -> Result<NeuronState<F>> {
    state.check(x)?;
    let mut next = state.clone();
    li_update(&mut next, x, cfg);
    Ok(next)
}

/// In-place LIF step; lengths must already agree.
pub(crate) fn lif_update<F: Real>(state: &mut NeuronState<F>, x: &[F], cfg: &NeuronConfig) {
    let inv_tau = F::of(1.0 / cfg.tau);
    let vr = F::of(cfg.v_reset);
    let vth = F::of(cfg.v_threshold);
    for i in 0..x.len() {
        let h = charge(state.v[i], x[i], inv_tau, vr);
        let s = heaviside(h - vth);
        state.h[i] = h;
        state.s[i] = s;
        state.v[i] = h * (F::one() - s) + vr * s;
    }
}

pub(crate) fn li_update<F: Real>(state: &mut NeuronState<F>, x: &[F], cfg: &NeuronConfig) {
    let inv_tau = F::of(1.0 / cfg.tau);
    let vr = F::of(cfg.v_reset);
    for i in 0..x.len() {
        let v = charge(state.v[i], x[i], inv_tau, vr);
        state.h[i] = v;
        state.v[i] = v;
        state.s[i] = F::zero();
    }
}

/// LIF step with the Heaviside replaced by a smooth spike function.
///
/// Used only by gradient oracles; `spike` maps the threshold margin to a
/// soft spike value in `[0, 1]`.
pub(crate) fn lif_update_smooth<F: Real>(
    state: &mut NeuronState<F>,
    x: &[F],
    cfg: &NeuronConfig,
    spike: impl Fn(F) -> F,
) {
    let inv_tau = F::of(1.0 / cfg.tau);
    let vr = F::of(cfg.v_reset);
    let vth = F::of(cfg.v_threshold);
    for i in 0..x.len() {
        let h = charge(state.v[i], x[i], inv_tau, vr);
        let s = spike(h - vth);
        state.h[i] = h;
        state.s[i] = s;
        state.v[i] = h * (F::one() - s) + vr * s;
    }
}
