//! One run of each experiment: metrics for sweep rows plus CSV artifacts.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vwm_core::assoc::{run_trial, AssocSpec, Decoded};
use vwm_core::calib::{
    fit_lognormal, fit_switch_cdf, probe_voltages, synth_retention, synth_switch_observations, write_switch_report,
    ComplianceTable, SwitchObservation,
};
use vwm_core::device::{DeviceParams, SwitchTable};
use vwm_core::engine::{RunOptions, TraceKind, TraceRequest};
use vwm_core::rng::{derive_seed, stream, Purpose};
use vwm_core::storerecall::{failure_histogram, off_diagonal_mass, pooled_accuracy, run_store_recall, SrConfig};
use vwm_core::wmnet::{build_wm, standard_schedule, WmPhase, WmSpec};

use crate::config::{Experiment, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub metrics: Vec<(String, f64)>,
    pub artifacts: Vec<Artifact>,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn csv_bytes<S: Serialize>(rows: &[S]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.into_inner().map_err(runtime)
}

fn artifact(name: &str, bytes: Vec<u8>) -> Artifact {
    Artifact { name: name.into(), bytes }
}

pub fn run(cfg: &RunConfig, seed: u64) -> Result<Outcome, CliError> {
    match cfg.experiment {
        Experiment::DeviceChar => device_char(cfg, seed),
        Experiment::Fit => fit(cfg),
        Experiment::StoreRecall => store_recall(cfg, seed),
        Experiment::Wm => wm(cfg, seed),
        Experiment::Assoc => assoc(cfg, seed),
    }
}

/// Builds the experiment's model without running it.
pub fn check(cfg: &RunConfig) -> Result<(), CliError> {
    match cfg.experiment {
        Experiment::DeviceChar | Experiment::Fit => Ok(()),
        Experiment::StoreRecall => sr_config(cfg).map(|_| ()),
        Experiment::Wm => wm_spec(cfg).map(|_| ()),
        Experiment::Assoc => assoc_spec(cfg).map(|_| ()),
    }
}

fn retention(
    base: DeviceParams<f64>,
    mu: Option<f64>,
    sigma: Option<f64>,
    compliance: Option<f64>,
) -> DeviceParams<f64> {
    match (mu, sigma, compliance) {
        (Some(m), Some(s), _) => base.with_retention(m, s),
        (_, _, Some(c)) => ComplianceTable::default().lookup(c).device_params(base),
        _ => base,
    }
}

#[derive(Serialize)]
struct SwitchRow {
    pulse_width_ms: f64,
    v: f64,
    n_trials: u32,
    n_switched: u32,
}

#[derive(Serialize)]
struct RetentionFitRow {
    compliance_ua: f64,
    n: usize,
    mu_ret: f64,
    sigma_ret: f64,
    median_ms: f64,
    mean_ms: f64,
}

/// Simulated characterisation: switching curves at every width and
/// retention samples at one compliance current, refitted.
fn device_char(cfg: &RunConfig, seed: u64) -> Result<Outcome, CliError> {
    let p = &cfg.device_char;
    let table = SwitchTable::<f64>::default();
    let widths: Vec<f64> = if p.pulse_widths_ms.is_empty() {
        table.entries().iter().map(|e| e.pulse_width).collect()
    } else {
        p.pulse_widths_ms.clone()
    };
    let mut rng = stream(seed, Purpose::Calibration, 0);
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let (mut err_mu, mut err_sigma) = (0f64, 0f64);
    for &w in &widths {
        let truth = table.lookup(w).params;
        let obs = synth_switch_observations(&truth, &probe_voltages(&truth, p.voltages), p.trials, &mut rng);
        rows.extend(obs.iter().map(|o| SwitchRow {
            pulse_width_ms: w,
            v: o.v,
            n_trials: o.n_trials,
            n_switched: o.n_switched,
        }));
        let f = fit_switch_cdf(&obs, truth.pulse_width).map_err(runtime)?;
        err_mu = err_mu.max(((f.mu_v - truth.mu_v) / truth.mu_v).abs());
        err_sigma = err_sigma.max(((f.sigma_v - truth.sigma_v) / truth.sigma_v).abs());
        fits.push(f);
    }
    let mut report = Vec::new();
    write_switch_report(&fits, &mut report).map_err(runtime)?;

    let row = ComplianceTable::default().lookup(p.compliance_ua);
    let params = row.device_params(DeviceParams::<f64>::default());
    let mut rng = stream(seed, Purpose::Calibration, 1);
    let samples = synth_retention(&params, p.retention_samples, &mut rng);
    let lf = fit_lognormal(&samples).map_err(runtime)?;
    #[derive(Serialize)]
    struct Sample {
        t_ret_ms: f64,
    }
    let sample_rows: Vec<Sample> = samples.iter().map(|&t_ret_ms| Sample { t_ret_ms }).collect();
    let fit_rows = [RetentionFitRow {
        compliance_ua: p.compliance_ua,
        n: samples.len(),
        mu_ret: lf.mu_ret,
        sigma_ret: lf.sigma_ret,
        median_ms: lf.median(),
        mean_ms: lf.mean(),
    }];
    Ok(Outcome {
        metrics: vec![
            ("max_rel_err_mu_v".into(), err_mu),
            ("max_rel_err_sigma_v".into(), err_sigma),
            ("mu_ret".into(), lf.mu_ret),
            ("sigma_ret".into(), lf.sigma_ret),
        ],
        artifacts: vec![
            artifact("switching.csv", csv_bytes(&rows)?),
            artifact("switch_fit.csv", report),
            artifact("retention.csv", csv_bytes(&sample_rows)?),
            artifact("retention_fit.csv", csv_bytes(&fit_rows)?),
        ],
    })
}

#[derive(Deserialize)]
struct SwitchIn {
    pulse_width_ms: f64,
    v: f64,
    n_trials: u32,
    n_switched: u32,
}

#[derive(Deserialize)]
struct RetentionIn {
    compliance_ua: f64,
    t_ret_ms: f64,
}

fn read_csv<D: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<Vec<D>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(runtime)?;
    rdr.deserialize().collect::<Result<Vec<D>, _>>().map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn fit(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    if let Some(path) = &cfg.fit.switching {
        let obs: Vec<SwitchObservation<f64>> = read_csv::<SwitchIn>(path)?
            .into_iter()
            .map(|r| SwitchObservation {
                v: r.v,
                width: r.pulse_width_ms,
                n_trials: r.n_trials,
                n_switched: r.n_switched,
            })
            .collect();
        let mut widths: Vec<f64> = obs.iter().map(|o| o.width).collect();
        widths.sort_by(f64::total_cmp);
        widths.dedup();
        let fits = widths
            .iter()
            .map(|&w| fit_switch_cdf(&obs, w).map_err(|e| runtime(format!("width {w} ms: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut report = Vec::new();
        write_switch_report(&fits, &mut report).map_err(runtime)?;
        out.metrics.push(("widths".into(), fits.len() as f64));
        out.artifacts.push(artifact("switch_fit.csv", report));
    }
    if let Some(path) = &cfg.fit.retention {
        let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in read_csv::<RetentionIn>(path)? {
            groups.entry(r.compliance_ua.to_bits()).or_default().push(r.t_ret_ms);
        }
        let mut keys: Vec<f64> = groups.keys().map(|k| f64::from_bits(*k)).collect();
        keys.sort_by(f64::total_cmp);
        let rows = keys
            .iter()
            .map(|&c| {
                let s = &groups[&c.to_bits()];
                let f = fit_lognormal(s).map_err(|e| runtime(format!("compliance {c} uA: {e}")))?;
                Ok(RetentionFitRow {
                    compliance_ua: c,
                    n: s.len(),
                    mu_ret: f.mu_ret,
                    sigma_ret: f.sigma_ret,
                    median_ms: f.median(),
                    mean_ms: f.mean(),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        out.metrics.push(("compliance_levels".into(), rows.len() as f64));
        out.artifacts.push(artifact("retention_fit.csv", csv_bytes(&rows)?));
    }
    Ok(out)
}

pub fn sr_config(cfg: &RunConfig) -> Result<SrConfig<f64>, CliError> {
    let p = &cfg.store_recall;
    let table = match &p.compliance_table {
        Some(path) => {
            let f = std::fs::File::open(path).map_err(|e| invalid(format!("store_recall.compliance_table: {e}")))?;
            ComplianceTable::from_csv(f).map_err(|e| invalid(format!("store_recall.compliance_table: {e}")))?
        }
        None => ComplianceTable::default(),
    };
    let mut c = SrConfig::from_compliance(p.p_on, p.f_stim_hz, p.i_cc_ua, &table);
    c.i_threshold_ua = p.threshold_ua;
    c.recall_switching = p.recall_switching;
    c.store_cap_ms = p.store_cap_ms;
    c.device = retention(c.device, p.mu_ret, p.sigma_ret, None);
    c.validate().map_err(|e| invalid(format!("store_recall: {e}")))?;
    c.palette.encode(&p.stored).map_err(|e| invalid(format!("store_recall.stored: {e}")))?;
    Ok(c)
}

fn store_recall(cfg: &RunConfig, seed: u64) -> Result<Outcome, CliError> {
    let p = &cfg.store_recall;
    let c = sr_config(cfg)?;
    let results = (0..p.runs)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let colors = c.palette.random_stream(p.presentations, s);
            run_store_recall(&c, &p.stored, &colors, s).map_err(runtime)
        })
        .collect::<Result<Vec<_>, _>>()?;

    #[derive(Serialize)]
    struct PresRow<'a> {
        run: usize,
        index: usize,
        time_ms: u64,
        color: &'a str,
        expected_on: u8,
        measured_on: u8,
        expected_ua: f64,
        measured_ua: f64,
        recognized: bool,
        correct: bool,
    }
    let pres: Vec<PresRow> = results
        .iter()
        .enumerate()
        .flat_map(|(run, r)| {
            r.presentations.iter().map(move |q| PresRow {
                run,
                index: q.index,
                time_ms: q.time_ms,
                color: &q.color,
                expected_on: q.expected_on,
                measured_on: q.measured_on,
                expected_ua: q.expected_ua,
                measured_ua: q.measured_ua,
                recognized: q.recognized,
                correct: q.correct,
            })
        })
        .collect();

    let accuracy = pooled_accuracy(&results);
    let stored_fraction = results.iter().filter(|r| r.store.succeeded()).count() as f64 / results.len() as f64;
    let current_err = results.iter().map(|r| r.avg_current_error_ua).sum::<f64>() / results.len() as f64;
    let hist = failure_histogram(&results);
    let (above, below) = off_diagonal_mass(&hist);

    #[derive(Serialize)]
    struct Summary {
        p_on: f64,
        f_stim_hz: f64,
        i_cc_ua: f64,
        runs: usize,
        presentations: usize,
        accuracy: f64,
        stored_fraction: f64,
        avg_current_error_ua: f64,
        error_above: f64,
        error_below: f64,
    }
    let summary = [Summary {
        p_on: p.p_on,
        f_stim_hz: p.f_stim_hz,
        i_cc_ua: p.i_cc_ua,
        runs: p.runs,
        presentations: p.presentations,
        accuracy,
        stored_fraction,
        avg_current_error_ua: current_err,
        error_above: above,
        error_below: below,
    }];
    #[derive(Serialize)]
    struct HistRow {
        expected_on: usize,
        measured_0: f64,
        measured_1: f64,
        measured_2: f64,
        measured_3: f64,
    }
    let hist_rows: Vec<HistRow> = hist
        .iter()
        .enumerate()
        .map(|(i, r)| HistRow {
            expected_on: i,
            measured_0: r[0],
            measured_1: r[1],
            measured_2: r[2],
            measured_3: r[3],
        })
        .collect();
    Ok(Outcome {
        metrics: vec![
            ("accuracy".into(), accuracy),
            ("stored_fraction".into(), stored_fraction),
            ("avg_current_error_ua".into(), current_err),
            ("error_above".into(), above),
            ("error_below".into(), below),
        ],
        artifacts: vec![
            artifact("presentations.csv", csv_bytes(&pres)?),
            artifact("summary.csv", csv_bytes(&summary)?),
            artifact("failure_histogram.csv", csv_bytes(&hist_rows)?),
        ],
    })
}

pub fn wm_spec(cfg: &RunConfig) -> Result<WmSpec<f64>, CliError> {
    let p = &cfg.wm;
    let base = if p.preset == "full" { WmSpec::full() } else { WmSpec::desk() };
    let device = retention(base.device, p.mu_ret, p.sigma_ret, p.compliance_ua).with_rho(p.rho);
    let spec = base.with_device(device);
    spec.validate().map_err(|e| invalid(format!("wm: {e}")))?;
    let schedule = wm_schedule(cfg);
    if let Some(bad) = schedule.iter().find_map(|ph| match ph {
        WmPhase::Store { item, .. } if *item >= spec.n_items => Some(*item),
        _ => None,
    }) {
        return Err(invalid(format!("wm.item: item {bad} out of range (n_items = {})", spec.n_items)));
    }
    Ok(spec)
}

fn wm_schedule(cfg: &RunConfig) -> Vec<WmPhase> {
    cfg.wm.schedule.clone().unwrap_or_else(|| standard_schedule(cfg.wm.item, cfg.wm.delay_ms))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn wm(cfg: &RunConfig, seed: u64) -> Result<Outcome, CliError> {
    let p = &cfg.wm;
    let spec = wm_spec(cfg)?;
    let schedule = wm_schedule(cfg);
    // stored item for each recall phase: the latest store before it
    let mut recall_items = Vec::new();
    let mut last = p.item;
    for ph in &schedule {
        match *ph {
            WmPhase::Store { item, .. } => last = item,
            WmPhase::Recall { .. } => recall_items.push(last),
            WmPhase::Timeout { .. } => {}
        }
    }

    #[derive(Serialize)]
    struct SnrRow {
        run: usize,
        seed: u64,
        window: usize,
        start_ms: u64,
        end_ms: u64,
        item: usize,
        specific_hz: f64,
        nonspecific_hz: f64,
        snr: f64,
    }
    let runs = (0..p.runs)
        .into_par_iter()
        .map(|r| {
            let s = if r == 0 { seed } else { derive_seed(seed, r as u64) };
            let mut net = build_wm(&spec, s).map_err(runtime)?;
            let mut opts = RunOptions::default();
            if r == 0 && p.raster && p.trace_every_ms > 0 {
                opts.trace_every = p.trace_every_ms;
                opts.traces = (0..spec.n_items)
                    .map(|k| TraceRequest {
                        channel: format!("on_item{k}"),
                        kind: TraceKind::DevicesOn(Some(format!("item{k}"))),
                    })
                    .chain([TraceRequest { channel: "u_exc".into(), kind: TraceKind::MeanPotential("exc".into()) }])
                    .collect();
            }
            let out = net.run_protocol(&schedule, s, &opts).map_err(runtime)?;
            let mut rows = Vec::new();
            let recalls = out.phases.iter().filter(|w| w.label == vwm_core::engine::PhaseLabel::Recall);
            for (window, (w, &item)) in recalls.zip(&recall_items).enumerate() {
                let snr = net.snr(&out.raster, item, w.start_ms, w.end_ms).map_err(runtime)?;
                rows.push(SnrRow {
                    run: r,
                    seed: s,
                    window,
                    start_ms: w.start_ms,
                    end_ms: w.end_ms,
                    item,
                    specific_hz: snr.specific_hz,
                    nonspecific_hz: snr.nonspecific_hz,
                    snr: snr.ratio,
                });
            }
            let mut files = Vec::new();
            if r == 0 && p.raster {
                let mut raster = Vec::new();
                out.raster.write_csv(&mut raster).map_err(runtime)?;
                files.push(artifact("raster.csv", raster));
                if !opts.traces.is_empty() {
                    let mut traces = Vec::new();
                    out.traces.write_csv(&mut traces).map_err(runtime)?;
                    files.push(artifact("traces.csv", traces));
                }
            }
            Ok((rows, files))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for (r, f) in runs {
        rows.extend(r);
        artifacts.extend(f);
    }
    let finals: Vec<&SnrRow> = (0..p.runs).filter_map(|r| rows.iter().rfind(|x| x.run == r)).collect();
    let mean = |f: fn(&SnrRow) -> f64| finals.iter().map(|x| f(x)).sum::<f64>() / finals.len().max(1) as f64;
    let metrics = vec![
        ("snr_median".into(), median(finals.iter().map(|x| x.snr).collect())),
        ("specific_hz".into(), mean(|x| x.specific_hz)),
        ("nonspecific_hz".into(), mean(|x| x.nonspecific_hz)),
    ];
    artifacts.push(artifact("snr.csv", csv_bytes(&rows)?));
    Ok(Outcome { metrics, artifacts })
}

pub fn assoc_spec(cfg: &RunConfig) -> Result<AssocSpec<f64>, CliError> {
    let p = &cfg.assoc;
    let base = AssocSpec::<f64>::default();
    let device = retention(base.device, p.mu_ret, p.sigma_ret, p.compliance_ua).with_rho(p.rho);
    let spec = AssocSpec { store_ms: p.store_ms, recall_ms: p.recall_ms, ..base.with_device(device) };
    spec.validate().map_err(|e| invalid(format!("assoc: {e}")))?;
    Ok(spec)
}

fn assoc(cfg: &RunConfig, seed: u64) -> Result<Outcome, CliError> {
    let p = &cfg.assoc;
    let spec = assoc_spec(cfg)?;
    let jobs: Vec<(usize, u64, usize)> =
        p.delays_ms.iter().enumerate().flat_map(|(d, &delay)| (0..p.trials).map(move |k| (d, delay, k))).collect();
    let trials = jobs
        .par_iter()
        .map(|&(d, delay, k)| {
            run_trial(&spec, delay, k, derive_seed(derive_seed(seed, d as u64), k as u64)).map_err(runtime)
        })
        .collect::<Result<Vec<_>, _>>()?;

    #[derive(Serialize)]
    struct DecodeRow {
        delay_ms: u64,
        trial: usize,
        object: String,
        cue: String,
        decoded: String,
        correct: bool,
    }
    let log: Vec<DecodeRow> = trials
        .iter()
        .map(|t| DecodeRow {
            delay_ms: t.delay_ms,
            trial: t.trial,
            object: t.object.join("/"),
            cue: t.cue.clone(),
            decoded: t
                .decoded
                .iter()
                .map(|d| match d {
                    Decoded::Feature(f) => f.as_str(),
                    Decoded::Undecided => "?",
                })
                .collect::<Vec<_>>()
                .join("/"),
            correct: t.correct,
        })
        .collect();

    #[derive(Serialize)]
    struct ErrRow {
        delay_ms: u64,
        trials: usize,
        errors: usize,
        error: f64,
    }
    let errs: Vec<ErrRow> = p
        .delays_ms
        .iter()
        .map(|&delay| {
            let errors = trials.iter().filter(|t| t.delay_ms == delay && !t.correct).count();
            ErrRow { delay_ms: delay, trials: p.trials, errors, error: errors as f64 / p.trials as f64 }
        })
        .collect();
    Ok(Outcome {
        metrics: errs.iter().map(|e| (format!("error_{}ms", e.delay_ms), e.error)).collect(),
        artifacts: vec![
            artifact("decode_log.csv", csv_bytes(&log)?),
            artifact("error_vs_delay.csv", csv_bytes(&errs)?),
        ],
    })
}
