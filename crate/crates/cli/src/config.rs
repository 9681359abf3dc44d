//! Run configuration.
//!
//! A config is a TOML file; command-line flags are applied on top of it as
//! dotted key overrides before anything is parsed, so a flag always wins and
//! the same validation covers both. Unknown keys are rejected.
//!
//! ```toml
//! experiment = "store-recall"   # device-char | fit | store-recall | wm | assoc
//! seed = 7
//! seeds = 3                     # sweep only: seeds seed, seed+1, ...
//! out_dir = "runs/sr"           # optional; VWM_OUT_DIR, then ./vwm-out
//! workers = 0                   # 0 uses every core
//!
//! [store_recall]
//! p_on = 0.05
//! f_stim_hz = 50.0
//!
//! [sweep]                       # keys of the experiment's block
//! p_on = [0.05, 0.3]
//! f_stim_hz = [10.0, 50.0]
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vwm_core::wmnet::WmPhase;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    DeviceChar,
    Fit,
    StoreRecall,
    Wm,
    Assoc,
}

impl Experiment {
    /// Name of the parameter table.
    pub fn block(self) -> &'static str {
        match self {
            Experiment::DeviceChar => "device_char",
            Experiment::Fit => "fit",
            Experiment::StoreRecall => "store_recall",
            Experiment::Wm => "wm",
            Experiment::Assoc => "assoc",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Experiment::DeviceChar => "device-char",
            Experiment::Fit => "fit",
            Experiment::StoreRecall => "store-recall",
            Experiment::Wm => "wm",
            Experiment::Assoc => "assoc",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub seeds: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub device_char: DeviceCharParams,
    #[serde(default)]
    pub fit: FitParams,
    #[serde(default)]
    pub store_recall: StoreRecallParams,
    #[serde(default)]
    pub wm: WmParams,
    #[serde(default)]
    pub assoc: AssocParams,
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceCharParams {
    /// Empty means every tabulated width.
    pub pulse_widths_ms: Vec<f64>,
    pub voltages: usize,
    pub trials: u32,
    pub retention_samples: usize,
    pub compliance_ua: f64,
}

impl Default for DeviceCharParams {
    fn default() -> Self {
        Self { pulse_widths_ms: Vec::new(), voltages: 8, trials: 100, retention_samples: 10_000, compliance_ua: 330.0 }
    }
}

/// Measured data to fit. Switching CSV: `pulse_width_ms,v,n_trials,n_switched`.
/// Retention CSV: `compliance_ua,t_ret_ms`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitParams {
    pub switching: Option<PathBuf>,
    pub retention: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreRecallParams {
    pub p_on: f64,
    pub f_stim_hz: f64,
    pub i_cc_ua: f64,
    pub threshold_ua: f64,
    pub stored: String,
    pub runs: usize,
    pub presentations: usize,
    pub recall_switching: bool,
    pub store_cap_ms: u64,
    /// CSV `compliance_ua,mu_ret,sigma_ret,normative`; built-in table if unset.
    pub compliance_table: Option<PathBuf>,
    /// Overrides the retention taken from the compliance table.
    pub mu_ret: Option<f64>,
    pub sigma_ret: Option<f64>,
}

impl Default for StoreRecallParams {
    fn default() -> Self {
        Self {
            p_on: 0.05,
            f_stim_hz: 50.0,
            i_cc_ua: 17.0,
            threshold_ua: 42.0,
            stored: "green".into(),
            runs: 10,
            presentations: 100,
            recall_switching: true,
            store_cap_ms: 10_000,
            compliance_table: None,
            mu_ret: None,
            sigma_ret: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WmParams {
    /// `desk` or `full`.
    pub preset: String,
    pub mu_ret: Option<f64>,
    pub sigma_ret: Option<f64>,
    /// Takes retention from the compliance table instead.
    pub compliance_ua: Option<f64>,
    pub rho: f64,
    pub item: usize,
    pub delay_ms: u64,
    /// Replaces the default baseline, store, delay, recall schedule.
    pub schedule: Option<Vec<WmPhase>>,
    pub runs: usize,
    /// Raster and traces of the first run.
    pub raster: bool,
    pub trace_every_ms: u64,
}

impl Default for WmParams {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            mu_ret: None,
            sigma_ret: None,
            compliance_ua: None,
            rho: 0.05,
            item: 0,
            delay_ms: 1000,
            schedule: None,
            runs: 1,
            raster: true,
            trace_every_ms: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssocParams {
    pub delays_ms: Vec<u64>,
    pub trials: usize,
    pub compliance_ua: Option<f64>,
    pub mu_ret: Option<f64>,
    pub sigma_ret: Option<f64>,
    pub rho: f64,
    pub store_ms: u64,
    pub recall_ms: u64,
}

impl Default for AssocParams {
    fn default() -> Self {
        Self {
            delays_ms: vec![100, 300, 600, 1000, 2000, 5000],
            trials: 200,
            compliance_ua: None,
            mu_ret: None,
            sigma_ret: None,
            rho: 0.2,
            store_ms: 500,
            recall_ms: 200,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Sets `key` (dotted) in `table`, creating intermediate tables.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| invalid(format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn read_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<toml::Table>().map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Parses and validates a table; the message of a parse error quotes the
/// offending key.
pub fn parse_config(table: &toml::Table) -> Result<RunConfig, CliError> {
    let text = toml::to_string(table).map_err(|e| invalid(e.to_string()))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| invalid(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn check(ok: bool, key: &str, what: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(invalid(format!("{key}: {what}")))
    }
}

fn check_file(path: &Option<PathBuf>, key: &str) -> Result<(), CliError> {
    match path {
        Some(p) if !p.is_file() => Err(invalid(format!("{key}: file {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

fn check_retention(mu: Option<f64>, sigma: Option<f64>, compliance: Option<f64>, block: &str) -> Result<(), CliError> {
    check(mu.is_some() == sigma.is_some(), &format!("{block}.mu_ret"), "mu_ret and sigma_ret go together")?;
    if let Some(s) = sigma {
        check(s > 0.0 && s.is_finite(), &format!("{block}.sigma_ret"), "must be > 0")?;
    }
    if let Some(m) = mu {
        check(m.is_finite(), &format!("{block}.mu_ret"), "must be finite")?;
    }
    if let Some(c) = compliance {
        check(mu.is_none(), &format!("{block}.compliance_ua"), "conflicts with mu_ret/sigma_ret")?;
        check(c > 0.0, &format!("{block}.compliance_ua"), "must be > 0")?;
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        check(self.seeds >= 1, "seeds", "must be >= 1")?;
        let d = &self.device_char;
        for w in &d.pulse_widths_ms {
            check(*w > 0.0, "device_char.pulse_widths_ms", "widths must be > 0")?;
        }
        check(d.voltages >= 3, "device_char.voltages", "need at least 3")?;
        check(d.trials >= 1, "device_char.trials", "must be >= 1")?;
        check(d.retention_samples >= 2, "device_char.retention_samples", "must be >= 2")?;
        check(d.compliance_ua > 0.0, "device_char.compliance_ua", "must be > 0")?;

        check_file(&self.fit.switching, "fit.switching")?;
        check_file(&self.fit.retention, "fit.retention")?;
        if self.experiment == Experiment::Fit {
            check(
                self.fit.switching.is_some() || self.fit.retention.is_some(),
                "fit.switching",
                "give fit.switching and/or fit.retention",
            )?;
        }

        let s = &self.store_recall;
        check((0.0..=1.0).contains(&s.p_on), "store_recall.p_on", "must lie in [0, 1]")?;
        check(s.f_stim_hz > 0.0 && s.f_stim_hz <= 1000.0, "store_recall.f_stim_hz", "must lie in (0, 1000]")?;
        check(s.i_cc_ua > 0.0, "store_recall.i_cc_ua", "must be > 0")?;
        check(s.runs >= 1, "store_recall.runs", "must be >= 1")?;
        check(s.presentations >= 1, "store_recall.presentations", "must be >= 1")?;
        check(s.store_cap_ms >= 1, "store_recall.store_cap_ms", "must be >= 1")?;
        check_file(&s.compliance_table, "store_recall.compliance_table")?;
        check_retention(s.mu_ret, s.sigma_ret, None, "store_recall")?;

        let w = &self.wm;
        check(w.preset == "desk" || w.preset == "full", "wm.preset", "must be `desk` or `full`")?;
        check((0.0..=1.0).contains(&w.rho), "wm.rho", "must lie in [0, 1]")?;
        check(w.runs >= 1, "wm.runs", "must be >= 1")?;
        if let Some(s) = &w.schedule {
            check(!s.is_empty(), "wm.schedule", "must not be empty")?;
        }
        check_retention(w.mu_ret, w.sigma_ret, w.compliance_ua, "wm")?;

        let a = &self.assoc;
        check(!a.delays_ms.is_empty(), "assoc.delays_ms", "must not be empty")?;
        let mut d = a.delays_ms.clone();
        d.sort_unstable();
        d.dedup();
        check(d.len() == a.delays_ms.len(), "assoc.delays_ms", "delays must be distinct")?;
        check(a.trials >= 1, "assoc.trials", "must be >= 1")?;
        check((0.0..=1.0).contains(&a.rho), "assoc.rho", "must lie in [0, 1]")?;
        check_retention(a.mu_ret, a.sigma_ret, a.compliance_ua, "assoc")?;

        for (k, v) in &self.sweep {
            check(!v.is_empty(), &format!("sweep.{k}"), "grid must not be empty")?;
        }
        Ok(())
    }
}

/// One grid point: the swept keys with their values, in key order.
pub type GridPoint = Vec<(String, toml::Value)>;

/// Cartesian product of the sweep grids; the last key varies fastest.
pub fn plan_grid(sweep: &BTreeMap<String, Vec<toml::Value>>) -> Vec<GridPoint> {
    let mut points: Vec<GridPoint> = vec![Vec::new()];
    for (k, values) in sweep {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

/// Seeds of a sweep: `seed, seed + 1, ...`.
pub fn sweep_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        parse_config(&text.parse::<toml::Table>().unwrap())
    }

    #[test]
    fn minimal_store_recall_gets_defaults() {
        let c = parse("experiment = \"store-recall\"").unwrap();
        assert_eq!(c.store_recall.p_on, 0.05);
        assert_eq!(c.store_recall.f_stim_hz, 50.0);
        assert_eq!(c.store_recall.threshold_ua, 42.0);
        assert_eq!(c.seeds, 1);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse("experiment = \"wm\"\n[wm]\nrhoo = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("rhoo"), "{e}");
        assert!(matches!(e, CliError::Validation(_)));
    }

    #[test]
    fn negative_duration_is_named() {
        let e = parse("experiment = \"wm\"\n[wm]\ndelay_ms = -5\n").unwrap_err();
        assert!(e.to_string().contains("delay_ms"), "{e}");
    }

    #[test]
    fn out_of_range_value_is_named() {
        let e = parse("experiment = \"store-recall\"\n[store_recall]\np_on = 1.5\n").unwrap_err();
        assert!(e.to_string().contains("store_recall.p_on"), "{e}");
    }

    #[test]
    fn missing_file_is_rejected() {
        let e = parse("experiment = \"fit\"\n[fit]\nswitching = \"/nonexistent/x.csv\"\n").unwrap_err();
        assert!(e.to_string().contains("fit.switching"), "{e}");
    }

    #[test]
    fn empty_grid_is_rejected() {
        let e = parse("experiment = \"store-recall\"\n[sweep]\np_on = []\n").unwrap_err();
        assert!(e.to_string().contains("sweep.p_on"), "{e}");
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut t: toml::Table = "experiment = \"store-recall\"\n[store_recall]\np_on = 0.1\n".parse().unwrap();
        set_key(&mut t, "store_recall.p_on", toml::Value::Float(0.3)).unwrap();
        set_key(&mut t, "wm.rho", toml::Value::Float(0.5)).unwrap();
        let c = parse_config(&t).unwrap();
        assert_eq!(c.store_recall.p_on, 0.3);
        assert_eq!(c.wm.rho, 0.5);
    }

    #[test]
    fn grid_is_cartesian() {
        let c =
            parse("experiment = \"store-recall\"\n[sweep]\np_on = [0.05, 0.1]\nf_stim_hz = [10.0, 50.0]\n").unwrap();
        let g = plan_grid(&c.sweep);
        assert_eq!(g.len(), 4);
        assert_eq!(g[0][0].0, "f_stim_hz");
        assert_eq!(g[1][1].1, toml::Value::Float(0.1));
        assert_eq!(plan_grid(&BTreeMap::new()).len(), 1);
    }

    #[test]
    fn wm_schedule_parses() {
        let c = parse(
            "experiment = \"wm\"\n[wm]\nschedule = [{phase = \"store\", item = 2, duration_ms = 500}, {phase = \"recall\", duration_ms = 300}]\n",
        )
        .unwrap();
        assert_eq!(c.wm.schedule.unwrap()[0], WmPhase::Store { item: 2, duration_ms: 500 });
    }
}
