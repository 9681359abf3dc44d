//! Current-based leaky integrate-and-fire neuron, Euler-stepped.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum NeuronError {
    #[error("invalid neuron parameter `{name}` = {value}: {reason}")]
    InvalidParameter { name: &'static str, value: f64, reason: &'static str },
}

/// Potentials in mV (or V for the associative network), times in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams<T> {
    pub tau_m: T,
    pub u_rest: T,
    pub theta: T,
    pub u_reset: T,
    /// Steps held at `u_reset` after a spike.
    pub t_refrac: u64,
    /// Mean of the noise added to `u` every step.
    pub noise_mean: T,
    /// Standard deviation of the noise added to `u` every step.
    pub noise_std: T,
}

impl<T: Scalar> LifParams<T> {
    /// Noise-free neuron with reset to rest.
    pub fn new(tau_m: T, u_rest: T, theta: T, t_refrac: u64) -> Self {
        Self { tau_m, u_rest, theta, u_reset: u_rest, t_refrac, noise_mean: T::zero(), noise_std: T::zero() }
    }

    /// Sets the per-step noise so that, below threshold and with no other
    /// input, the membrane settles at `u_rest + offset` with standard
    /// deviation `std`.
    ///
    /// The free membrane is an AR(1) process with coefficient
    /// `a = 1 - dt/tau`: a per-step mean `m` shifts it by `m tau/dt` and a
    /// per-step deviation `s` gives `s / sqrt(1 - a²)`.
    pub fn with_membrane_noise(mut self, offset: T, std: T, dt: T) -> Self {
        let a = T::one() - dt / self.tau_m;
        self.noise_mean = offset * dt / self.tau_m;
        self.noise_std = std * (T::one() - a * a).sqrt();
        self
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        let bad = |name, value: T, reason| NeuronError::InvalidParameter { name, value: value.as_f64(), reason };
        if !(self.tau_m > T::zero()) {
            return Err(bad("tau_m", self.tau_m, "must be > 0"));
        }
        if !(self.theta > self.u_reset) {
            return Err(bad("theta", self.theta, "must exceed u_reset"));
        }
        if !(self.noise_std >= T::zero()) {
            return Err(bad("noise_std", self.noise_std, "must be >= 0"));
        }
        if !self.u_rest.is_finite() || !self.noise_mean.is_finite() {
            return Err(bad("u_rest", self.u_rest, "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifState<T> {
    pub u: T,
    /// First step at which the neuron integrates again.
    pub refrac_until: u64,
}

impl<T: Scalar> LifState<T> {
    pub fn at_rest(params: &LifParams<T>) -> Self {
        Self { u: params.u_rest, refrac_until: 0 }
    }

    pub fn is_refractory(&self, t: u64) -> bool {
        t < self.refrac_until
    }
}

/// Advances one neuron by one step starting at time `t`.
///
/// Refractory neurons stay at `u_reset`, ignore input and draw no noise. A
/// spike at `t` keeps the neuron silent for steps `t+1 ..= t+t_refrac`.
#[inline]
pub fn lif_step<T: Scalar, R: Rng + ?Sized>(
    state: LifState<T>,
    i_in: T,
    t: u64,
    dt: T,
    params: &LifParams<T>,
    rng: &mut R,
) -> (LifState<T>, bool) {
    if state.is_refractory(t) {
        return (LifState { u: params.u_reset, ..state }, false);
    }
    let noise = if params.noise_std > T::zero() {
        params.noise_mean + params.noise_std * T::sample_standard_normal(rng)
    } else {
        params.noise_mean
    };
    let u = state.u - dt * (state.u - params.u_rest) / params.tau_m + i_in + noise;
    if u >= params.theta {
        (LifState { u: params.u_reset, refrac_until: t + params.t_refrac + 1 }, true)
    } else {
        (LifState { u, refrac_until: state.refrac_until }, false)
    }
}
