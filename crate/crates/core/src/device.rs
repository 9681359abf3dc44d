//! Stochastic volatile memristive synapse.
//!
//! A device is a binary element. An OFF device that receives a programming
//! pulse turns ON with some probability and then stays ON for a lognormally
//! distributed retention time, after which it relaxes back to OFF. A pulse on
//! an ON device refreshes it: the retention time is redrawn from the pulse
//! time.
//!
//! Simulation time is an integer number of milliseconds. Retention draws are
//! continuous; they are rounded up to whole steps with a minimum of one.

use std::io::Read;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{bernoulli, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error("invalid device parameter `{name}` = {value}: {reason}")]
    InvalidParameter { name: &'static str, value: f64, reason: &'static str },
    #[error("burst switching needs at least one pulse")]
    ZeroPulses,
    #[error("switch table is empty")]
    EmptyTable,
    #[error("switch table csv: {0}")]
    Csv(String),
}

pub(crate) fn check<T: Scalar>(
    ok: bool,
    name: &'static str,
    value: T,
    reason: &'static str,
) -> Result<(), DeviceError> {
    if ok {
        Ok(())
    } else {
        Err(DeviceError::InvalidParameter { name, value: value.to_f64().unwrap_or(f64::NAN), reason })
    }
}

/// Parameters of one device (or one class of identical devices).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams<T> {
    /// Location of `ln t_ret` with `t_ret` in milliseconds.
    pub mu_ret: T,
    /// Scale of `ln t_ret`.
    pub sigma_ret: T,
    /// Per-pulse switching probability when driven by probability.
    pub rho: T,
    /// Transmission multiplier in the ON (low resistance) state.
    pub r_on: T,
    /// `r_off / r_on`; the OFF state transmits `r_on / r_off_ratio`.
    pub r_off_ratio: T,
}

impl<T: Scalar> Default for DeviceParams<T> {
    /// Parameters used for the network simulations: `mu = 7.24`,
    /// `sigma = 0.82`, `rho = 0.05`, OFF state 20 times weaker.
    fn default() -> Self {
        Self {
            mu_ret: T::lit(7.24),
            sigma_ret: T::lit(0.82),
            rho: T::lit(0.05),
            r_on: T::one(),
            r_off_ratio: T::lit(20.0),
        }
    }
}

impl<T: Scalar> DeviceParams<T> {
    pub fn validate(&self) -> Result<(), DeviceError> {
        check(self.mu_ret.is_finite(), "mu_ret", self.mu_ret, "must be finite")?;
        check(self.sigma_ret > T::zero() && self.sigma_ret.is_finite(), "sigma_ret", self.sigma_ret, "must be > 0")?;
        check(self.rho >= T::zero() && self.rho <= T::one(), "rho", self.rho, "must lie in [0, 1]")?;
        check(self.r_on > T::zero() && self.r_on.is_finite(), "r_on", self.r_on, "must be > 0")?;
        check(self.r_off_ratio > T::one(), "r_off_ratio", self.r_off_ratio, "must be > 1")?;
        Ok(())
    }

    pub fn with_retention(mut self, mu_ret: T, sigma_ret: T) -> Self {
        self.mu_ret = mu_ret;
        self.sigma_ret = sigma_ret;
        self
    }

    pub fn with_rho(mut self, rho: T) -> Self {
        self.rho = rho;
        self
    }

    pub fn off_weight(&self) -> T {
        self.r_on / self.r_off_ratio
    }

    /// `e^mu`, the median retention time in ms.
    pub fn retention_median(&self) -> T {
        self.mu_ret.exp()
    }

    /// `e^(mu + sigma²/2)`, the mean retention time in ms.
    pub fn retention_mean(&self) -> T {
        (self.mu_ret + self.sigma_ret * self.sigma_ret / T::lit(2.0)).exp()
    }
}

/// Error-function fit of single-pulse switching probability against pulse
/// amplitude, for one pulse width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchCdfParams<T> {
    pub pulse_width: T,
    pub mu_v: T,
    /// Standard deviation of the switching voltage.
    pub sigma_v: T,
}

impl<T: Scalar> SwitchCdfParams<T> {
    pub fn new(pulse_width: T, mu_v: T, sigma_v: T) -> Result<Self, DeviceError> {
        let p = Self { pulse_width, mu_v, sigma_v };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        check(self.pulse_width > T::zero(), "pulse_width", self.pulse_width, "must be > 0")?;
        check(self.mu_v.is_finite(), "mu_v", self.mu_v, "must be finite")?;
        check(self.sigma_v > T::zero() && self.sigma_v.is_finite(), "sigma_v", self.sigma_v, "must be > 0")
    }
}

/// Measured switching fits per pulse width (ms, V, V).
pub const SWITCHING_TABLE: [(f64, f64, f64); 7] = [
    (0.05, 2.31, 0.38),
    (0.10, 2.11, 0.33),
    (0.15, 1.86, 0.30),
    (0.50, 1.73, 0.22),
    (1.00, 1.21, 0.16),
    (2.00, 0.61, 0.15),
    (5.00, 0.59, 0.11),
];

/// Result of a pulse-width lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchLookup<T> {
    pub params: SwitchCdfParams<T>,
    /// False when the requested width was not in the table and the nearest
    /// entry was substituted.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchTable<T> {
    entries: Vec<SwitchCdfParams<T>>,
}

#[derive(Deserialize)]
struct SwitchRow {
    pulse_width_ms: f64,
    mu_v: f64,
    sigma_v: f64,
}

impl<T: Scalar> Default for SwitchTable<T> {
    fn default() -> Self {
        let entries = SWITCHING_TABLE
            .iter()
            .map(|&(w, m, s)| SwitchCdfParams { pulse_width: T::lit(w), mu_v: T::lit(m), sigma_v: T::lit(s) })
            .collect();
        Self { entries }
    }
}

impl<T: Scalar> SwitchTable<T> {
    pub fn new(mut entries: Vec<SwitchCdfParams<T>>) -> Result<Self, DeviceError> {
        if entries.is_empty() {
            return Err(DeviceError::EmptyTable);
        }
        for e in &entries {
            e.validate()?;
        }
        entries.sort_by(|a, b| a.pulse_width.partial_cmp(&b.pulse_width).expect("validated"));
        Ok(Self { entries })
    }

    /// Reads `pulse_width_ms,mu_v,sigma_v` rows.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, DeviceError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for row in rdr.deserialize::<SwitchRow>() {
            let row = row.map_err(|e| DeviceError::Csv(e.to_string()))?;
            entries.push(SwitchCdfParams {
                pulse_width: T::lit(row.pulse_width_ms),
                mu_v: T::lit(row.mu_v),
                sigma_v: T::lit(row.sigma_v),
            });
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[SwitchCdfParams<T>] {
        &self.entries
    }

    /// Nearest-width entry; never interpolates. Logs a warning when the width
    /// is not in the table.
    pub fn lookup(&self, pulse_width: T) -> SwitchLookup<T> {
        let best = self
            .entries
            .iter()
            .min_by(|a, b| {
                let da = (a.pulse_width - pulse_width).abs();
                let db = (b.pulse_width - pulse_width).abs();
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
            })
            .copied()
            .expect("table is non-empty");
        let exact = (best.pulse_width - pulse_width).abs() <= T::lit(1e-9) * best.pulse_width.max(T::one());
        if !exact {
            log::warn!("pulse width {pulse_width} ms not tabulated; using nearest entry {} ms", best.pulse_width);
        }
        SwitchLookup { params: best, exact }
    }
}

/// Single-pulse switching probability for amplitude `v`.
pub fn p_on_voltage<T: Scalar>(v: T, cdf: &SwitchCdfParams<T>) -> T {
    let z = (v - cdf.mu_v) / (cdf.sigma_v * T::SQRT_2());
    T::lit(0.5) * (T::one() + z.erf())
}

/// Probability that at least one of `n` independent pulses switches an OFF
/// device.
pub fn p_on_burst<T: Scalar>(p1: T, n: u32) -> Result<T, DeviceError> {
    if n == 0 {
        return Err(DeviceError::ZeroPulses);
    }
    check(p1 >= T::zero() && p1 <= T::one(), "p1", p1, "must lie in [0, 1]")?;
    Ok(T::one() - (T::one() - p1).powi(n as i32))
}

/// Draws a retention time in milliseconds.
pub fn sample_retention<T: Scalar, R: Rng + ?Sized>(params: &DeviceParams<T>, rng: &mut R) -> T {
    (params.mu_ret + params.sigma_ret * T::sample_standard_normal(rng)).exp()
}

/// Whole simulation steps a retention draw lasts: rounded up, at least one.
pub fn retention_steps<T: Scalar>(t_ret: T) -> u64 {
    let ceil = t_ret.ceil();
    if ceil.is_nan() || ceil < T::one() {
        1
    } else {
        ceil.to_u64().unwrap_or(u64::MAX)
    }
}

/// How a programming pulse is specified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Drive<T> {
    /// Switch with a fixed probability per pulse.
    Probability(T),
    /// Switch with the error-function probability of a pulse amplitude.
    Pulse { volts: T, cdf: SwitchCdfParams<T> },
}

impl<T: Scalar> Drive<T> {
    /// A voltage pulse whose width is resolved against `table`.
    pub fn pulse(volts: T, pulse_width: T, table: &SwitchTable<T>) -> Self {
        Drive::Pulse { volts, cdf: table.lookup(pulse_width).params }
    }

    pub fn probability(&self) -> T {
        match self {
            Drive::Probability(p) => *p,
            Drive::Pulse { volts, cdf } => p_on_voltage(*volts, cdf),
        }
    }
}

/// Runtime state of one device. `expires_at` is only meaningful while ON.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DeviceState {
    pub on: bool,
    pub expires_at: u64,
}

impl DeviceState {
    pub const OFF: DeviceState = DeviceState { on: false, expires_at: 0 };

    /// Applies a programming pulse arriving at `t`.
    ///
    /// Expiry is applied first, so a device whose retention ran out before
    /// `t` behaves as OFF.
    pub fn on_pre_spike<T: Scalar, R: Rng + ?Sized>(
        self,
        t: u64,
        drive: &Drive<T>,
        params: &DeviceParams<T>,
        rng: &mut R,
    ) -> Self {
        self.stimulate(t, drive.probability(), params, rng)
    }

    /// Same as [`DeviceState::on_pre_spike`] with an already resolved
    /// switching probability.
    #[inline]
    pub fn stimulate<T: Scalar, R: Rng + ?Sized>(
        self,
        t: u64,
        p_switch: T,
        params: &DeviceParams<T>,
        rng: &mut R,
    ) -> Self {
        let current = self.expire(t);
        if current.on || bernoulli(p_switch, rng) {
            let t_ret = sample_retention(params, rng);
            DeviceState { on: true, expires_at: t.saturating_add(retention_steps(t_ret)) }
        } else {
            current
        }
    }

    #[inline]
    pub fn expire(self, t: u64) -> Self {
        if self.on && t >= self.expires_at {
            DeviceState::OFF
        } else {
            self
        }
    }

    #[inline]
    pub fn is_on_at(&self, t: u64) -> bool {
        self.on && t < self.expires_at
    }

    /// Transmission of the device in its current state.
    #[inline]
    pub fn weight<T: Scalar>(&self, params: &DeviceParams<T>) -> T {
        if self.on {
            params.r_on
        } else {
            params.off_weight()
        }
    }
}
