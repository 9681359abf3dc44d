//! Grid sweeps: every grid point with every seed, run concurrently.
//!
//! Rows come out in grid order, seeds varying fastest, whatever order the
//! workers finish in. A point that fails gets a row with its error in the
//! `status` column and the sweep goes on.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::{parse_config, plan_grid, set_key, sweep_seeds, Experiment, GridPoint, RunConfig};
use crate::experiments::{self, Artifact};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: GridPoint,
    pub seed: u64,
    /// `ok` or `error: ...`.
    pub status: String,
    pub metrics: Vec<(String, f64)>,
}

fn show(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Configuration of every grid point; a point that does not parse makes the
/// whole sweep invalid.
pub fn point_configs(table: &toml::Table, cfg: &RunConfig) -> Result<Vec<(GridPoint, RunConfig)>, CliError> {
    plan_grid(&cfg.sweep)
        .into_iter()
        .map(|point| {
            let mut t = table.clone();
            t.remove("sweep");
            for (k, v) in &point {
                set_key(&mut t, &format!("{}.{k}", cfg.experiment.block()), v.clone())?;
            }
            let c =
                parse_config(&t).map_err(|e| CliError::Validation(format!("sweep point {}: {e}", label(&point))))?;
            Ok((point, c))
        })
        .collect()
}

fn label(point: &GridPoint) -> String {
    point.iter().map(|(k, v)| format!("{k}={}", show(v))).collect::<Vec<_>>().join(",")
}

pub fn run_sweep(table: &toml::Table, cfg: &RunConfig) -> Result<Vec<SweepRow>, CliError> {
    let points = point_configs(table, cfg)?;
    let seeds = sweep_seeds(cfg);
    let jobs: Vec<(usize, u64)> = (0..points.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    Ok(jobs
        .par_iter()
        .map(|&(i, seed)| {
            let (point, c) = &points[i];
            let res = experiments::check(c).and_then(|_| experiments::run(c, seed));
            match res {
                Ok(o) => SweepRow { point: point.clone(), seed, status: "ok".into(), metrics: o.metrics },
                Err(e) => {
                    log::warn!("sweep point {} seed {seed} failed: {e}", label(point));
                    SweepRow { point: point.clone(), seed, status: format!("error: {e}"), metrics: Vec::new() }
                }
            }
        })
        .collect())
}

/// `sweep.csv`, plus `accuracy_matrix.csv` for store/recall sweeps.
pub fn sweep_artifacts(cfg: &RunConfig, rows: &[SweepRow]) -> Result<Vec<Artifact>, CliError> {
    let keys: Vec<String> = cfg.sweep.keys().cloned().collect();
    let mut metric_names: Vec<String> = Vec::new();
    for r in rows {
        for (m, _) in &r.metrics {
            if !metric_names.contains(m) {
                metric_names.push(m.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    let header: Vec<String> =
        keys.iter().cloned().chain(["seed".into(), "status".into()]).chain(metric_names.iter().cloned()).collect();
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec: Vec<String> = r.point.iter().map(|(_, v)| show(v)).collect();
        rec.push(r.seed.to_string());
        rec.push(r.status.clone());
        for m in &metric_names {
            rec.push(r.metrics.iter().find(|(n, _)| n == m).map(|(_, v)| v.to_string()).unwrap_or_default());
        }
        w.write_record(&rec).map_err(err)?;
    }
    let mut out = vec![Artifact {
        name: "sweep.csv".into(),
        bytes: w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?,
    }];
    if cfg.experiment == Experiment::StoreRecall {
        out.push(Artifact { name: "accuracy_matrix.csv".into(), bytes: accuracy_matrix(cfg, rows)? });
    }
    Ok(out)
}

/// Mean accuracy over seeds (and any other swept key) with one row per
/// `p_on` and one column per stimulation rate. Failed runs are left out;
/// an empty cell means every run there failed.
fn accuracy_matrix(cfg: &RunConfig, rows: &[SweepRow]) -> Result<Vec<u8>, CliError> {
    let value = |r: &SweepRow, key: &str, default: f64| {
        r.point
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.as_float().or(v.as_integer().map(|i| i as f64)))
            .unwrap_or(default)
    };
    let mut cells: BTreeMap<(u64, u64), (f64, usize)> = BTreeMap::new();
    let (mut ps, mut fs) = (Vec::new(), Vec::new());
    for r in rows {
        let p = value(r, "p_on", cfg.store_recall.p_on);
        let f = value(r, "f_stim_hz", cfg.store_recall.f_stim_hz);
        ps.push(p);
        fs.push(f);
        let e = cells.entry((p.to_bits(), f.to_bits())).or_insert((0.0, 0));
        if let Some((_, a)) = r.metrics.iter().find(|(n, _)| n == "accuracy") {
            e.0 += a;
            e.1 += 1;
        }
    }
    for v in [&mut ps, &mut fs] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    let header: Vec<String> =
        std::iter::once("p_on".to_string()).chain(fs.iter().map(|f| format!("f_stim_{f}"))).collect();
    w.write_record(&header).map_err(err)?;
    for &p in &ps {
        let mut rec = vec![p.to_string()];
        for &f in &fs {
            rec.push(match cells.get(&(p.to_bits(), f.to_bits())) {
                Some((s, n)) if *n > 0 => (s / *n as f64).to_string(),
                _ => String::new(),
            });
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))
}
