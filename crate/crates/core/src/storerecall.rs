//! Five-device pattern store and recall.
//!
//! A colour is a 3-of-5 code. Storing drives the colour's three devices with
//! pulses at `f_stim` until all three are ON. Recall then presents a stream
//! of colours at the same rate; each presentation pulses that colour's
//! devices and the summed current through the stimulated ON devices is
//! compared with a threshold. Presentations can switch OFF devices ON, and
//! devices that are not refreshed relax, so recall is imperfect.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::ComplianceTable;
use crate::device::{DeviceParams, DeviceState};
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum SrError {
    #[error("pattern `{0}` is not five bits with exactly three set")]
    BadCode(String),
    #[error("unknown colour `{0}`")]
    UnknownColor(String),
    #[error("palette: {0}")]
    BadPalette(String),
    #[error("invalid store/recall config: {0}")]
    InvalidConfig(String),
}

/// Five device bits, exactly three set. Bit 0 is the leftmost character of
/// the string form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatternCode([bool; 5]);

impl PatternCode {
    pub fn new(bits: [bool; 5]) -> Result<Self, SrError> {
        let code = PatternCode(bits);
        if bits.iter().filter(|b| **b).count() != 3 {
            return Err(SrError::BadCode(code.to_string()));
        }
        Ok(code)
    }

    pub fn bits(&self) -> [bool; 5] {
        self.0
    }

    pub fn overlap(&self, other: &PatternCode) -> usize {
        self.0.iter().zip(other.0.iter()).filter(|(a, b)| **a && **b).count()
    }

    /// All ten codes in lexicographic order of their string form.
    pub fn all() -> Vec<PatternCode> {
        let mut v: Vec<PatternCode> = (0u8..32)
            .filter(|m| m.count_ones() == 3)
            .map(|m| PatternCode(std::array::from_fn(|i| m & (1 << (4 - i)) != 0)))
            .collect();
        v.sort_by_key(|c| c.to_string());
        v
    }
}

impl fmt::Display for PatternCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for PatternCode {
    type Err = SrError;

    fn from_str(s: &str) -> Result<Self, SrError> {
        let chars: Vec<char> = s.trim().chars().collect();
        if chars.len() != 5 || chars.iter().any(|c| *c != '0' && *c != '1') {
            return Err(SrError::BadCode(s.into()));
        }
        PatternCode::new(std::array::from_fn(|i| chars[i] == '1'))
    }
}

impl Serialize for PatternCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PatternCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Injective colour to code map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<(String, PatternCode)>,
}

pub const GREEN: &str = "green";

impl Default for Palette {
    /// Green is `01101`; the other four colours take the first unused codes
    /// in lexicographic order.
    fn default() -> Self {
        let green: PatternCode = "01101".parse().expect("valid code");
        let rest = PatternCode::all().into_iter().filter(|c| *c != green);
        let mut colors = vec![(GREEN.to_string(), green)];
        colors.extend(["red", "blue", "yellow", "magenta"].iter().map(|s| s.to_string()).zip(rest));
        Palette { colors }
    }
}

impl Palette {
    pub fn new(colors: Vec<(String, PatternCode)>) -> Result<Self, SrError> {
        if colors.is_empty() {
            return Err(SrError::BadPalette("no colours".into()));
        }
        for (i, (name, code)) in colors.iter().enumerate() {
            for (other, oc) in &colors[..i] {
                if other == name {
                    return Err(SrError::BadPalette(format!("duplicate colour `{name}`")));
                }
                if oc == code {
                    return Err(SrError::BadPalette(format!("`{name}` and `{other}` share code {code}")));
                }
            }
        }
        Ok(Palette { colors })
    }

    pub fn encode(&self, color: &str) -> Result<PatternCode, SrError> {
        self.colors.iter().find(|(n, _)| n == color).map(|(_, c)| *c).ok_or_else(|| SrError::UnknownColor(color.into()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.colors.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Uniformly random colours, drawn from the stimulus stream of `seed`.
    pub fn random_stream(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = stream(seed, Purpose::Stimulus, 0);
        (0..n).map(|_| self.colors[rng.random_range(0..self.colors.len())].0.clone()).collect()
    }
}

/// Current through the stimulated devices that are ON; OFF devices
/// contribute nothing.
pub fn total_current<T: Scalar>(states: &[DeviceState; 5], stimulated: &PatternCode, i_cc: T, t: u64) -> T {
    let n = states.iter().zip(stimulated.0.iter()).filter(|(s, st)| **st && s.is_on_at(t)).count();
    i_cc * T::lit(n as f64)
}

/// Recognised when the current reaches the threshold.
pub fn classify<T: Scalar>(current: T, threshold: T) -> bool {
    current >= threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrConfig<T> {
    pub p_on: T,
    pub f_stim_hz: T,
    /// Current through one ON device, in uA. Also the compliance current
    /// that sets the retention distribution.
    pub i_cc_ua: T,
    pub i_threshold_ua: T,
    pub device: DeviceParams<T>,
    /// Simulated time after which an unfinished store gives up.
    pub store_cap_ms: u64,
    /// Whether recall pulses may switch OFF devices ON.
    pub recall_switching: bool,
    pub palette: Palette,
}

impl<T: Scalar> Default for SrConfig<T> {
    fn default() -> Self {
        Self::from_compliance(T::lit(0.05), T::lit(50.0), T::lit(17.0), &ComplianceTable::default())
    }
}

impl<T: Scalar> SrConfig<T> {
    /// Retention from the compliance table row nearest `i_cc_ua`.
    pub fn from_compliance(p_on: T, f_stim_hz: T, i_cc_ua: T, table: &ComplianceTable) -> Self {
        let row = table.lookup(i_cc_ua.as_f64());
        Self {
            p_on,
            f_stim_hz,
            i_cc_ua,
            i_threshold_ua: T::lit(42.0),
            device: row.device_params(DeviceParams::default().with_rho(p_on)),
            store_cap_ms: 10_000,
            recall_switching: true,
            palette: Palette::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SrError> {
        let bad = |s: String| Err(SrError::InvalidConfig(s));
        if !(self.p_on >= T::zero() && self.p_on <= T::one()) {
            return bad(format!("p_on {} outside [0, 1]", self.p_on));
        }
        if !(self.f_stim_hz > T::zero()) || self.f_stim_hz > T::lit(1000.0) {
            return bad(format!("f_stim {} Hz must be in (0, 1000]", self.f_stim_hz));
        }
        if !(self.i_cc_ua > T::zero()) {
            return bad("i_cc must be > 0".into());
        }
        let two = T::lit(2.0) * self.i_cc_ua;
        let three = T::lit(3.0) * self.i_cc_ua;
        if !(self.i_threshold_ua > two && self.i_threshold_ua <= three) {
            return bad(format!("threshold {} uA must lie in ({two}, {three}]", self.i_threshold_ua));
        }
        if self.store_cap_ms == 0 {
            return bad("store cap must be > 0".into());
        }
        self.device.validate().map_err(|e| SrError::InvalidConfig(e.to_string()))
    }

    /// Time of the `k`-th pulse.
    pub fn pulse_time(&self, k: u64) -> u64 {
        (T::lit(k as f64) * T::lit(1000.0) / self.f_stim_hz).floor().as_f64() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum StoreOutcome {
    /// All three devices ON after `pulses` pulses; the last one at `time_ms`.
    Stored { pulses: u64, time_ms: u64 },
    /// The cap was reached first.
    Failed { pulses: u64 },
}

impl StoreOutcome {
    pub fn succeeded(&self) -> bool {
        matches!(self, StoreOutcome::Stored { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presentation {
    pub index: usize,
    pub time_ms: u64,
    pub color: String,
    /// Stimulated devices that an ideal memory of the stored colour has ON.
    pub expected_on: u8,
    pub measured_on: u8,
    pub expected_ua: f64,
    pub measured_ua: f64,
    pub recognized: bool,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrResult {
    pub stored: String,
    pub store: StoreOutcome,
    pub accuracy: f64,
    /// Mean of measured minus expected current.
    pub avg_current_error_ua: f64,
    pub presentations: Vec<Presentation>,
}

fn pulse<T: Scalar, R: Rng + ?Sized>(
    states: &mut [DeviceState; 5],
    code: &PatternCode,
    t: u64,
    p: T,
    params: &DeviceParams<T>,
    rng: &mut R,
) {
    for (s, on) in states.iter_mut().zip(code.0.iter()) {
        *s = s.expire(t);
        if *on {
            *s = s.stimulate(t, p, params, rng);
        }
    }
}

/// Stores `stored`, then presents `test_stream`. The current is read right
/// after each pulse. Device randomness comes from the device stream of
/// `seed`.
pub fn run_store_recall<T: Scalar>(
    config: &SrConfig<T>,
    stored: &str,
    test_stream: &[String],
    seed: u64,
) -> Result<SrResult, SrError> {
    config.validate()?;
    let target = config.palette.encode(stored)?;
    let codes: Vec<PatternCode> = test_stream.iter().map(|c| config.palette.encode(c)).collect::<Result<_, _>>()?;
    let mut rng = stream(seed, Purpose::Device, 0);
    let mut states = [DeviceState::OFF; 5];
    let params = &config.device;

    let mut k = 0u64;
    let store = loop {
        let t = config.pulse_time(k);
        if t >= config.store_cap_ms {
            log::debug!("store of {stored} failed after {k} pulses");
            break StoreOutcome::Failed { pulses: k };
        }
        pulse(&mut states, &target, t, config.p_on, params, &mut rng);
        k += 1;
        if target.0.iter().zip(states.iter()).all(|(b, s)| !*b || s.is_on_at(t)) {
            break StoreOutcome::Stored { pulses: k, time_ms: t };
        }
    };

    let recall_p = if config.recall_switching { config.p_on } else { T::zero() };
    let mut presentations = Vec::with_capacity(codes.len());
    let mut correct = 0usize;
    let mut err_sum = 0.0;
    for (index, (code, color)) in codes.iter().zip(test_stream).enumerate() {
        let t = config.pulse_time(k);
        k += 1;
        pulse(&mut states, code, t, recall_p, params, &mut rng);
        let measured = total_current(&states, code, config.i_cc_ua, t);
        let expected_on = code.overlap(&target) as u8;
        let measured_on = (measured / config.i_cc_ua).round().as_f64() as u8;
        let expected = config.i_cc_ua.as_f64() * expected_on as f64;
        let recognized = classify(measured, config.i_threshold_ua);
        let is_correct = recognized == (*code == target);
        correct += is_correct as usize;
        err_sum += measured.as_f64() - expected;
        presentations.push(Presentation {
            index,
            time_ms: t,
            color: color.clone(),
            expected_on,
            measured_on,
            expected_ua: expected,
            measured_ua: measured.as_f64(),
            recognized,
            correct: is_correct,
        });
    }
    let n = presentations.len().max(1) as f64;
    Ok(SrResult {
        stored: stored.into(),
        store,
        accuracy: if presentations.is_empty() { f64::NAN } else { correct as f64 / n },
        avg_current_error_ua: if presentations.is_empty() { f64::NAN } else { err_sum / n },
        presentations,
    })
}

/// Row-normalised occurrence matrix: row = expected ON count (0..=3),
/// column = measured ON count. Rows without data stay zero.
pub fn failure_histogram(results: &[SrResult]) -> [[f64; 4]; 4] {
    let mut m = [[0f64; 4]; 4];
    for r in results {
        for p in &r.presentations {
            m[p.expected_on.min(3) as usize][p.measured_on.min(3) as usize] += 1.0;
        }
    }
    for row in m.iter_mut() {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    m
}

/// Probability mass above (measured > expected) and below the diagonal,
/// averaged over the rows that have data.
pub fn off_diagonal_mass(m: &[[f64; 4]; 4]) -> (f64, f64) {
    let rows: Vec<usize> = (0..4).filter(|&i| m[i].iter().sum::<f64>() > 0.0).collect();
    let n = rows.len().max(1) as f64;
    let above = rows.iter().map(|&i| (i + 1..4).map(|j| m[i][j]).sum::<f64>()).sum::<f64>() / n;
    let below = rows.iter().map(|&i| (0..i).map(|j| m[i][j]).sum::<f64>()).sum::<f64>() / n;
    (above, below)
}

/// `runs` independent store/recall runs of `n_presentations` random colours
/// each; run `r` uses the seed `crate::rng::derive_seed(seed, r)` for both
/// its stimulus stream and its devices.
pub fn repeated_runs<T: Scalar>(
    config: &SrConfig<T>,
    stored: &str,
    runs: usize,
    n_presentations: usize,
    seed: u64,
) -> Result<Vec<SrResult>, SrError> {
    (0..runs)
        .map(|r| {
            let s = crate::rng::derive_seed(seed, r as u64);
            let colors = config.palette.random_stream(n_presentations, s);
            run_store_recall(config, stored, &colors, s)
        })
        .collect()
}

/// Presentation-weighted accuracy over several runs.
pub fn pooled_accuracy(results: &[SrResult]) -> f64 {
    let (c, n) = results.iter().fold((0usize, 0usize), |(c, n), r| {
        (c + r.presentations.iter().filter(|p| p.correct).count(), n + r.presentations.len())
    });
    c as f64 / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_palette() {
        let p = Palette::default();
        assert_eq!(p.encode("green").unwrap().to_string(), "01101");
        let codes: Vec<String> = p.colors.iter().map(|(_, c)| c.to_string()).collect();
        assert_eq!(codes, ["01101", "00111", "01011", "01110", "10011"]);
        assert!(Palette::new(p.colors.clone()).is_ok());
        assert_eq!(p.encode("teal"), Err(SrError::UnknownColor("teal".into())));
    }

    #[test]
    fn codes_need_three_bits() {
        assert!("01100".parse::<PatternCode>().is_err());
        assert!("0110x".parse::<PatternCode>().is_err());
        assert_eq!(PatternCode::all().len(), 10);
    }

    #[test]
    fn palette_rejects_shared_codes() {
        let c: PatternCode = "01101".parse().unwrap();
        assert!(Palette::new(vec![("a".into(), c), ("b".into(), c)]).is_err());
    }

    #[test]
    fn currents_and_threshold() {
        let on = DeviceState { on: true, expires_at: 100 };
        let off = DeviceState::OFF;
        let g: PatternCode = "01101".parse().unwrap();
        assert_eq!(total_current(&[off, on, on, off, on], &g, 17.0, 5), 51.0);
        assert_eq!(total_current(&[on, on, off, on, on], &g, 17.0, 5), 34.0);
        assert_eq!(total_current(&[off; 5], &g, 17.0, 5), 0.0);
        assert!(classify(51.0, 42.0));
        assert!(!classify(34.0, 42.0));
        assert!(classify(42.0, 42.0));
    }

    #[test]
    fn threshold_must_sit_between_two_and_three_devices() {
        let mut c = SrConfig::<f64> { i_threshold_ua: 60.0, ..Default::default() };
        assert!(c.validate().is_err());
        c.i_threshold_ua = 34.0;
        assert!(c.validate().is_err());
        assert!(SrConfig::<f64>::default().validate().is_ok());
    }

    #[test]
    fn default_config() {
        let c = SrConfig::<f64>::default();
        assert_eq!(c.p_on, 0.05);
        assert_eq!(c.f_stim_hz, 50.0);
        assert!((c.device.retention_median() - 28.0).abs() < 1e-9);
        assert_eq!(c.pulse_time(3), 60);
        let c3 = SrConfig { f_stim_hz: 30.0, ..c };
        assert_eq!(c3.pulse_time(1), 33);
    }

    #[test]
    fn zero_switching_fails_at_cap() {
        let c = SrConfig { p_on: 0.0, ..SrConfig::<f64>::default() };
        let r = run_store_recall(&c, "green", &["green".to_string()], 1).unwrap();
        assert_eq!(r.store, StoreOutcome::Failed { pulses: 500 });
        assert_eq!(r.presentations.len(), 1);
    }

    #[test]
    fn ideal_devices_recall_perfectly() {
        let mut c = SrConfig::<f64>::default();
        c.p_on = 1.0;
        c.device = c.device.with_retention(1e6, 1e-6);
        c.recall_switching = false;
        let colors = c.palette.random_stream(200, 3);
        let r = run_store_recall(&c, "green", &colors, 3).unwrap();
        assert_eq!(r.store, StoreOutcome::Stored { pulses: 1, time_ms: 0 });
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.avg_current_error_ua, 0.0);
        let h = failure_histogram(&[r]);
        for (i, row) in h.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn histogram_rows_sum_to_one() {
        let c = SrConfig::<f64>::default();
        let rs = repeated_runs(&c, "green", 5, 100, 11).unwrap();
        let h = failure_histogram(&rs);
        for row in h {
            let s: f64 = row.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn failure_modes_follow_drive_strength() {
        // Strong drive leaves more extra devices ON, weak drive lets more
        // stored ones relax.
        let d = SrConfig::<f64>::default();
        let strong = SrConfig { p_on: 0.3, device: d.device.with_rho(0.3), ..d.clone() };
        let weak = SrConfig { f_stim_hz: 10.0, ..d };
        let hs = failure_histogram(&repeated_runs(&strong, "green", 20, 100, 5).unwrap());
        let hw = failure_histogram(&repeated_runs(&weak, "green", 20, 100, 5).unwrap());
        let (above_s, below_s) = off_diagonal_mass(&hs);
        let (above_w, below_w) = off_diagonal_mass(&hw);
        assert!(above_s > above_w, "{above_s} {above_w}");
        assert!(below_w > below_s, "{below_w} {below_s}");
    }

    #[test]
    fn store_time_shrinks_with_switching_probability() {
        let mean_store = |p: f64| {
            let c = SrConfig { p_on: p, ..SrConfig::<f64>::default() };
            let rs = repeated_runs(&c, "green", 40, 0, 2).unwrap();
            let (ok, t): (Vec<bool>, Vec<f64>) = rs
                .iter()
                .map(|r| match r.store {
                    StoreOutcome::Stored { time_ms, .. } => (true, time_ms as f64),
                    StoreOutcome::Failed { .. } => (false, c.store_cap_ms as f64),
                })
                .unzip();
            (ok.iter().filter(|x| **x).count(), crate::stats::mean(&t))
        };
        let (ok30, t30) = mean_store(0.3);
        let (ok1, t1) = mean_store(0.01);
        assert_eq!(ok30, 40);
        assert!(ok1 <= 4, "{ok1}");
        assert!(t30 < 1000.0, "{t30}");
        assert!(t1 > t30);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn deterministic_per_seed(seed in any::<u64>(), p in 0.0f64..0.5) {
            let c = SrConfig { p_on: p, ..SrConfig::<f64>::default() };
            let colors = c.palette.random_stream(50, seed);
            let a = run_store_recall(&c, "red", &colors, seed).unwrap();
            let b = run_store_recall(&c, "red", &colors, seed).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn currents_are_multiples_of_one_device(seed in any::<u64>()) {
            let c = SrConfig::<f64>::default();
            let colors = c.palette.random_stream(50, seed);
            let r = run_store_recall(&c, "blue", &colors, seed).unwrap();
            for p in &r.presentations {
                prop_assert!(p.measured_on <= 3);
                prop_assert!((p.measured_ua - 17.0 * p.measured_on as f64).abs() < 1e-9);
            }
        }
    }
}
