//! Fitting device parameters from measurement-style data.
//!
//! Switching curves are fitted by binomial maximum likelihood under the
//! error-function model; retention samples by the closed-form lognormal MLE.
//! Compliance current maps to retention parameters through a lookup table.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{sample_retention, DeviceError, DeviceParams, SwitchCdfParams};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum CalibError {
    #[error("need at least {needed} distinct voltages at width {width} ms, found {found}")]
    TooFewVoltages { width: f64, needed: usize, found: usize },
    #[error("switching data is unidentifiable: {0}")]
    Unidentifiable(&'static str),
    #[error("observation {index} is invalid: {reason}")]
    InvalidObservation { index: usize, reason: &'static str },
    #[error("need at least 2 retention samples, got {0}")]
    TooFewSamples(usize),
    #[error("retention sample {index} is not positive ({value})")]
    NonPositive { index: usize, value: f64 },
    #[error("compliance table is empty")]
    EmptyTable,
    #[error("compliance table median retention decreases between {lower_ua} uA and {upper_ua} uA")]
    NonMonotone { lower_ua: f64, upper_ua: f64 },
    #[error("compliance table csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// Outcome of repeated pulses at one amplitude and width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchObservation<T> {
    pub v: T,
    pub width: T,
    pub n_trials: u32,
    pub n_switched: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionSample<T> {
    pub compliance: T,
    pub t_ret: T,
}

const MIN_VOLTAGES: usize = 3;
const FIT_TOL: f64 = 1e-6;

fn same_width<T: Scalar>(a: T, b: T) -> bool {
    (a - b).abs() <= T::lit(1e-9) * a.abs().max(T::one())
}

/// Binomial log-likelihood of `(mu, sigma)` on the observations.
pub fn switch_log_likelihood<T: Scalar>(obs: &[SwitchObservation<T>], mu_v: T, sigma_v: T) -> T {
    obs.iter()
        .map(|o| {
            let z = (o.v - mu_v) / sigma_v;
            let k = T::lit(o.n_switched as f64);
            let miss = T::lit((o.n_trials - o.n_switched) as f64);
            let mut ll = T::zero();
            if o.n_switched > 0 {
                ll = ll + k * z.ln_norm_cdf();
            }
            if o.n_trials > o.n_switched {
                ll = ll + miss * (-z).ln_norm_cdf();
            }
            ll
        })
        .sum()
}

/// Golden-section maximisation of a unimodal function on `[a, b]`.
fn golden_max<F: FnMut(f64) -> f64>(mut a: f64, mut b: f64, tol: f64, mut f: F) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Maximum-likelihood error-function fit to the observations at `width`.
///
/// Observations at other widths are ignored. The probit log-likelihood is
/// concave in `(-mu/sigma, 1/sigma)`, so both the inner search over `mu` and
/// the profile over `sigma` are unimodal and golden-section search finds the
/// global optimum. Completely separated data drives `sigma` to the lower
/// search bound.
pub fn fit_switch_cdf<T: Scalar>(
    observations: &[SwitchObservation<T>],
    width: T,
) -> Result<SwitchCdfParams<T>, CalibError> {
    let mut obs = Vec::new();
    for (index, o) in observations.iter().enumerate() {
        if o.n_trials == 0 {
            return Err(CalibError::InvalidObservation { index, reason: "n_trials must be >= 1" });
        }
        if o.n_switched > o.n_trials {
            return Err(CalibError::InvalidObservation { index, reason: "n_switched exceeds n_trials" });
        }
        if !o.v.is_finite() {
            return Err(CalibError::InvalidObservation { index, reason: "voltage is not finite" });
        }
        if same_width(o.width, width) {
            obs.push(*o);
        }
    }
    let mut volts: Vec<f64> = obs.iter().map(|o| o.v.as_f64()).collect();
    volts.sort_by(f64::total_cmp);
    volts.dedup();
    if volts.len() < MIN_VOLTAGES {
        return Err(CalibError::TooFewVoltages { width: width.as_f64(), needed: MIN_VOLTAGES, found: volts.len() });
    }
    if obs.iter().all(|o| o.n_switched == 0) {
        return Err(CalibError::Unidentifiable("no device ever switched"));
    }
    if obs.iter().all(|o| o.n_switched == o.n_trials) {
        return Err(CalibError::Unidentifiable("every device switched"));
    }

    // Work in f64 regardless of T; the result is cast back.
    let obs64: Vec<SwitchObservation<f64>> = obs
        .iter()
        .map(|o| SwitchObservation {
            v: o.v.as_f64(),
            width: o.width.as_f64(),
            n_trials: o.n_trials,
            n_switched: o.n_switched,
        })
        .collect();
    let (vmin, vmax) = (volts[0], volts[volts.len() - 1]);
    let span = vmax - vmin;
    let (mu_lo, mu_hi) = (vmin - 2.0 * span, vmax + 2.0 * span);
    let best_mu = |sigma: f64| golden_max(mu_lo, mu_hi, FIT_TOL, |mu| switch_log_likelihood(&obs64, mu, sigma));
    let (ls_lo, ls_hi) = ((span * 1e-4).ln(), (span * 10.0).ln());
    let log_sigma = golden_max(ls_lo, ls_hi, FIT_TOL / span, |ls| {
        let s = ls.exp();
        switch_log_likelihood(&obs64, best_mu(s), s)
    });
    let sigma = log_sigma.exp();
    let mu = best_mu(sigma);
    Ok(SwitchCdfParams::new(width, T::lit(mu), T::lit(sigma))?)
}

/// `count` equally spaced voltages from `mu - 2 sigma` to `mu + 2 sigma`.
pub fn probe_voltages<T: Scalar>(cdf: &SwitchCdfParams<T>, count: usize) -> Vec<T> {
    let lo = cdf.mu_v - T::lit(2.0) * cdf.sigma_v;
    let hi = cdf.mu_v + T::lit(2.0) * cdf.sigma_v;
    if count == 1 {
        return vec![cdf.mu_v];
    }
    (0..count).map(|i| lo + (hi - lo) * T::lit(i as f64 / (count - 1) as f64)).collect()
}

/// Simulated switching measurement: `n_trials` pulses on a fresh OFF device
/// at each voltage.
pub fn synth_switch_observations<T: Scalar, R: Rng + ?Sized>(
    cdf: &SwitchCdfParams<T>,
    voltages: &[T],
    n_trials: u32,
    rng: &mut R,
) -> Vec<SwitchObservation<T>> {
    voltages
        .iter()
        .map(|&v| {
            let p = crate::device::p_on_voltage(v, cdf);
            let n_switched = (0..n_trials).filter(|_| crate::scalar::bernoulli(p, rng)).count() as u32;
            SwitchObservation { v, width: cdf.pulse_width, n_trials, n_switched }
        })
        .collect()
}

/// Lognormal parameters of a retention distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalFit<T> {
    pub mu_ret: T,
    pub sigma_ret: T,
}

impl<T: Scalar> LognormalFit<T> {
    pub fn median(&self) -> T {
        self.mu_ret.exp()
    }

    pub fn mean(&self) -> T {
        (self.mu_ret + self.sigma_ret * self.sigma_ret / T::lit(2.0)).exp()
    }
}

/// Closed-form lognormal MLE: mean and population standard deviation of
/// `ln t`.
pub fn fit_lognormal<T: Scalar>(samples: &[T]) -> Result<LognormalFit<T>, CalibError> {
    if samples.len() < 2 {
        return Err(CalibError::TooFewSamples(samples.len()));
    }
    if let Some((index, v)) = samples.iter().enumerate().find(|(_, v)| !(**v > T::zero())) {
        return Err(CalibError::NonPositive { index, value: v.to_f64().unwrap_or(f64::NAN) });
    }
    let n = samples.len() as f64;
    let logs: Vec<f64> = samples.iter().map(|v| v.as_f64().ln()).collect();
    let mu = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / n;
    Ok(LognormalFit { mu_ret: T::lit(mu), sigma_ret: T::lit(var.sqrt()) })
}

pub fn synth_retention<T: Scalar, R: Rng + ?Sized>(params: &DeviceParams<T>, n: usize, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| sample_retention(params, rng)).collect()
}

/// One row of the compliance table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplianceEntry {
    pub compliance_ua: f64,
    pub mu_ret: f64,
    pub sigma_ret: f64,
    /// False for placeholder rows not anchored to a measurement.
    pub normative: bool,
}

impl ComplianceEntry {
    pub fn median_ms(&self) -> f64 {
        self.mu_ret.exp()
    }

    pub fn mean_ms(&self) -> f64 {
        (self.mu_ret + self.sigma_ret * self.sigma_ret / 2.0).exp()
    }

    pub fn device_params<T: Scalar>(&self, base: DeviceParams<T>) -> DeviceParams<T> {
        base.with_retention(T::lit(self.mu_ret), T::lit(self.sigma_ret))
    }
}

/// Retention parameters per programming compliance current, sorted by
/// current, with median retention non-decreasing in current.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplianceTable {
    entries: Vec<ComplianceEntry>,
}

/// `mu_ret` of the 70 uA row. Chosen so that associative recall keeps its
/// decoding error under 10% for delays up to about 600 ms.
pub const MU_RET_70UA: f64 = 7.0;
pub const SIGMA_RET_70UA: f64 = 0.25;

impl Default for ComplianceTable {
    fn default() -> Self {
        let row = |compliance_ua, mu_ret: f64, sigma_ret, normative| ComplianceEntry {
            compliance_ua,
            mu_ret,
            sigma_ret,
            normative,
        };
        Self {
            entries: vec![
                row(10.0, 10f64.ln(), 0.82, false),
                row(17.0, 28f64.ln(), 0.82, true),
                row(20.0, 50f64.ln(), 0.82, false),
                row(70.0, MU_RET_70UA, SIGMA_RET_70UA, true),
                row(330.0, 7.24, 0.82, true),
            ],
        }
    }
}

impl ComplianceTable {
    pub fn new(mut entries: Vec<ComplianceEntry>) -> Result<Self, CalibError> {
        if entries.is_empty() {
            return Err(CalibError::EmptyTable);
        }
        for e in &entries {
            if !(e.sigma_ret > 0.0) || !e.mu_ret.is_finite() || !(e.compliance_ua > 0.0) {
                return Err(CalibError::Device(DeviceError::InvalidParameter {
                    name: "compliance row",
                    value: e.compliance_ua,
                    reason: "needs compliance > 0, finite mu_ret and sigma_ret > 0",
                }));
            }
        }
        entries.sort_by(|a, b| a.compliance_ua.total_cmp(&b.compliance_ua));
        for w in entries.windows(2) {
            if w[1].mu_ret < w[0].mu_ret {
                return Err(CalibError::NonMonotone { lower_ua: w[0].compliance_ua, upper_ua: w[1].compliance_ua });
            }
        }
        Ok(Self { entries })
    }

    /// Reads `compliance_ua,mu_ret,sigma_ret,normative` rows. Lines starting
    /// with `#` are comments.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, CalibError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let mut entries = Vec::new();
        for row in rdr.deserialize::<ComplianceEntry>() {
            entries.push(row.map_err(|e| CalibError::Csv(e.to_string()))?);
        }
        Self::new(entries)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CalibError> {
        let mut wtr = csv::Writer::from_writer(w);
        for e in &self.entries {
            wtr.serialize(e).map_err(|e| CalibError::Csv(e.to_string()))?;
        }
        wtr.flush().map_err(|e| CalibError::Csv(e.to_string()))
    }

    pub fn entries(&self) -> &[ComplianceEntry] {
        &self.entries
    }

    /// Nearest entry by current; warns when `i_cc` is not tabulated.
    pub fn lookup(&self, i_cc: f64) -> ComplianceEntry {
        let e = *self
            .entries
            .iter()
            .min_by(|a, b| (a.compliance_ua - i_cc).abs().total_cmp(&(b.compliance_ua - i_cc).abs()))
            .expect("table is non-empty");
        if (e.compliance_ua - i_cc).abs() > 1e-9 {
            log::warn!("compliance {i_cc} uA not tabulated; using {} uA", e.compliance_ua);
        }
        if !e.normative {
            log::warn!("compliance row {} uA is a placeholder", e.compliance_ua);
        }
        e
    }
}

/// Writes a switching-fit summary with one row per pulse width:
/// `pulse_width_ms,mu_v,sigma_v`.
pub fn write_switch_report<T: Scalar, W: Write>(rows: &[SwitchCdfParams<T>], w: W) -> Result<(), CalibError> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| CalibError::Csv(e.to_string());
    wtr.write_record(["pulse_width_ms", "mu_v", "sigma_v"]).map_err(err)?;
    for r in rows {
        wtr.write_record([format!("{}", r.pulse_width), format!("{:.4}", r.mu_v), format!("{:.4}", r.sigma_v)])
            .map_err(err)?;
    }
    wtr.flush().map_err(|e| CalibError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    fn obs(v: f64, n: u32, k: u32) -> SwitchObservation<f64> {
        SwitchObservation { v, width: 1.0, n_trials: n, n_switched: k }
    }

    #[test]
    fn golden_section_finds_parabola_peak() {
        let x = golden_max(-10.0, 10.0, 1e-9, |x| -(x - 1.234).powi(2));
        assert!((x - 1.234).abs() < 1e-7);
    }

    #[test]
    fn noiseless_probabilities_recover_exactly() {
        // Expected counts with a huge number of trials pin the optimum.
        let truth = SwitchCdfParams::new(1.0, 1.21, 0.16).unwrap();
        let n = 1_000_000u32;
        let data: Vec<_> = probe_voltages(&truth, 8)
            .into_iter()
            .map(|v| obs(v, n, (crate::device::p_on_voltage(v, &truth) * n as f64).round() as u32))
            .collect();
        let fit = fit_switch_cdf(&data, 1.0).unwrap();
        assert!((fit.mu_v - 1.21).abs() < 1e-3, "{fit:?}");
        assert!((fit.sigma_v - 0.16).abs() < 1e-3, "{fit:?}");
    }

    #[test]
    fn single_voltage_is_rejected() {
        let e = fit_switch_cdf(&[obs(1.2, 100, 50)], 1.0).unwrap_err();
        assert!(matches!(e, CalibError::TooFewVoltages { found: 1, .. }));
    }

    #[test]
    fn saturated_data_is_unidentifiable() {
        let zeros = [obs(1.0, 10, 0), obs(1.1, 10, 0), obs(1.2, 10, 0)];
        assert!(matches!(fit_switch_cdf(&zeros, 1.0), Err(CalibError::Unidentifiable(_))));
        let ones = [obs(1.0, 10, 10), obs(1.1, 10, 10), obs(1.2, 10, 10)];
        assert!(matches!(fit_switch_cdf(&ones, 1.0), Err(CalibError::Unidentifiable(_))));
    }

    #[test]
    fn separated_data_gives_a_sharp_step() {
        let data = [obs(1.0, 10, 0), obs(1.1, 10, 0), obs(1.2, 10, 10), obs(1.3, 10, 10)];
        let fit = fit_switch_cdf(&data, 1.0).unwrap();
        assert!(fit.mu_v > 1.1 && fit.mu_v < 1.2);
        assert!(fit.sigma_v < 0.01);
    }

    #[test]
    fn other_widths_are_ignored() {
        let mut data = vec![obs(1.0, 10, 1), obs(1.1, 10, 5), obs(1.2, 10, 9)];
        data.push(SwitchObservation { v: 3.0, width: 2.0, n_trials: 10, n_switched: 0 });
        let a = fit_switch_cdf(&data, 1.0).unwrap();
        let b = fit_switch_cdf(&data[..3], 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_counts_are_rejected() {
        let e = fit_switch_cdf(&[obs(1.0, 10, 11), obs(1.1, 10, 1), obs(1.2, 10, 2)], 1.0).unwrap_err();
        assert_eq!(e, CalibError::InvalidObservation { index: 0, reason: "n_switched exceeds n_trials" });
    }

    #[test]
    fn lognormal_closed_forms() {
        let f = fit_lognormal(&[7f64.exp(); 5]).unwrap();
        assert!((f.mu_ret - 7.0).abs() < 1e-12 && f.sigma_ret.abs() < 1e-7);
        let f = fit_lognormal(&[6f64.exp(), 8f64.exp()]).unwrap();
        assert!((f.mu_ret - 7.0).abs() < 1e-12);
        assert!((f.sigma_ret - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lognormal_rejects_bad_samples() {
        assert_eq!(fit_lognormal(&[1.0f64]), Err(CalibError::TooFewSamples(1)));
        assert_eq!(fit_lognormal(&[1.0f64, 0.0, 3.0]), Err(CalibError::NonPositive { index: 1, value: 0.0 }));
        assert!(matches!(fit_lognormal(&[1.0f64, -2.0]), Err(CalibError::NonPositive { index: 1, .. })));
    }

    #[test]
    fn lognormal_round_trip() {
        let p = DeviceParams::<f64>::default();
        let xs = synth_retention(&p, 100_000, &mut stream(3, Purpose::Calibration, 0));
        let f = fit_lognormal(&xs).unwrap();
        assert!((f.mu_ret / 7.24 - 1.0).abs() < 0.01);
        assert!((f.sigma_ret / 0.82 - 1.0).abs() < 0.01);
    }

    #[test]
    fn compliance_defaults() {
        let t = ComplianceTable::default();
        let e17 = t.lookup(17.0);
        assert!((e17.median_ms() - 28.0).abs() < 1e-9);
        assert!((e17.mu_ret - 3.33).abs() < 0.01);
        let e330 = t.lookup(330.0);
        assert!((e330.median_ms() - 1394.09).abs() < 0.5);
        assert!(t.entries().windows(2).all(|w| w[0].median_ms() <= w[1].median_ms()));
        assert_eq!(t.lookup(300.0).compliance_ua, 330.0);
        assert!(!t.lookup(10.0).normative);
    }

    #[test]
    fn compliance_table_rejects_decreasing_medians() {
        let rows = "compliance_ua,mu_ret,sigma_ret,normative\n10,5.0,0.8,true\n20,4.0,0.8,true\n";
        assert_eq!(
            ComplianceTable::from_csv(rows.as_bytes()),
            Err(CalibError::NonMonotone { lower_ua: 10.0, upper_ua: 20.0 })
        );
        assert_eq!(
            ComplianceTable::from_csv("compliance_ua,mu_ret,sigma_ret,normative\n".as_bytes()),
            Err(CalibError::EmptyTable)
        );
    }

    #[test]
    fn compliance_csv_round_trip() {
        let t = ComplianceTable::default();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = ComplianceTable::from_csv(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn switch_report_shape() {
        let mut buf = Vec::new();
        write_switch_report(&[SwitchCdfParams::new(1.0f64, 1.21, 0.16).unwrap()], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "pulse_width_ms,mu_v,sigma_v\n1,1.2100,0.1600\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn optimum_beats_the_generator(seed in any::<u64>(), row in 0usize..7) {
            let (w, m, s) = crate::device::SWITCHING_TABLE[row];
            let truth = SwitchCdfParams::new(w, m, s).unwrap();
            let mut r = stream(seed, Purpose::Calibration, row as u64);
            let data = synth_switch_observations(&truth, &probe_voltages(&truth, 8), 100, &mut r);
            if let Ok(fit) = fit_switch_cdf(&data, w) {
                let at_fit = switch_log_likelihood(&data, fit.mu_v, fit.sigma_v);
                let at_truth = switch_log_likelihood(&data, m, s);
                prop_assert!(at_fit >= at_truth - 1e-6, "{at_fit} < {at_truth}");
            }
        }

        #[test]
        fn lognormal_fit_is_scale_equivariant(xs in proptest::collection::vec(0.01f64..1e4, 2..50), k in 0.1f64..10.0) {
            let a = fit_lognormal(&xs).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|x| x * k).collect();
            let b = fit_lognormal(&scaled).unwrap();
            prop_assert!((b.mu_ret - a.mu_ret - k.ln()).abs() < 1e-9);
            prop_assert!((b.sigma_ret - a.sigma_ret).abs() < 1e-9);
        }
    }
}
