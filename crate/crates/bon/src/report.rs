//! RunLog CSV files, run summaries and multi-run comparisons.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{BonError, Result};
use crate::train::{train, RunLog, RunOutput, RunRow, Timing, RUNLOG_HEADER};

pub fn encode_runlog(log: &RunLog) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| BonError::Runtime(format!("encoding run log: {e}"));
    for row in &log.rows {
        w.serialize(row).map_err(fail)?;
    }
    if log.rows.is_empty() {
        w.write_record(RUNLOG_HEADER).map_err(fail)?;
    }
    w.into_inner().map_err(|e| BonError::Runtime(format!("encoding run log: {e}")))
}

pub fn write_runlog(log: &RunLog, path: &Path) -> Result<()> {
    let bytes = encode_runlog(log)?;
    fs::write(path, bytes).map_err(|e| BonError::Runtime(format!("writing {}: {e}", path.display())))
}

pub fn read_runlog(path: &Path) -> Result<RunLog> {
    let origin = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| BonError::Runtime(format!("{origin}: {e}")))?;
    let header = r.headers().map_err(|e| BonError::Runtime(format!("{origin}: {e}")))?.clone();
    if header.iter().ne(RUNLOG_HEADER) {
        return Err(BonError::Parse {
            path: origin,
            line: 1,
            message: format!("unexpected columns {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<RunRow>().enumerate() {
        rows.push(rec.map_err(|e| BonError::Parse {
            path: origin.clone(),
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(RunLog { rows })
}

/// One line of a comparison: peak validation mAP and when it occurred.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub sampler: String,
    pub seed: u64,
    pub status: String,
    pub error: Option<String>,
    pub peak_val_map: Option<f64>,
    pub steps_to_peak: Option<u64>,
    pub final_train_map: Option<f64>,
    pub final_val_map: Option<f64>,
    pub steps_to_train_map_0_9: Option<u64>,
    pub steps_run: u64,
    pub timing: Option<Timing>,
    pub hash_fraction: Option<f64>,
}

impl RunSummary {
    pub fn from_output(cfg: &TrainConfig, out: &RunOutput) -> Self {
        let peak = out.log.peak_val();
        let last = out.log.rows.last();
        RunSummary {
            name: cfg.label(),
            sampler: cfg.sampler.to_string(),
            seed: cfg.seed,
            status: "ok".into(),
            error: None,
            peak_val_map: peak.map(|p| p.0),
            steps_to_peak: peak.map(|p| p.1),
            final_train_map: last.map(|r| r.train_map),
            final_val_map: last.map(|r| r.val_map),
            steps_to_train_map_0_9: out.log.steps_to_train_map(0.9),
            steps_run: out.steps_run,
            timing: Some(out.timing),
            hash_fraction: Some(out.timing.hash_fraction()),
        }
    }

    pub fn failed(cfg: &TrainConfig, err: &BonError) -> Self {
        RunSummary {
            name: cfg.label(),
            sampler: cfg.sampler.to_string(),
            seed: cfg.seed,
            status: "failed".into(),
            error: Some(err.to_string()),
            peak_val_map: None,
            steps_to_peak: None,
            final_train_map: None,
            final_val_map: None,
            steps_to_train_map_0_9: None,
            steps_run: 0,
            timing: None,
            hash_fraction: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| BonError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| BonError::Runtime(format!("writing {}: {e}", path.display())))
}

/// Parses a JSON array of run configurations.
pub fn parse_experiments(text: &str, origin: &str) -> Result<Vec<TrainConfig>> {
    let configs: Vec<TrainConfig> = serde_json::from_str(text).map_err(|e| BonError::Parse {
        path: origin.to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if configs.is_empty() {
        return Err(BonError::Usage(format!("{origin}: experiment list is empty")));
    }
    Ok(configs)
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub summaries: Vec<RunSummary>,
    pub csv_paths: Vec<PathBuf>,
    pub summary_path: PathBuf,
}

impl Comparison {
    pub fn all_ok(&self) -> bool {
        self.summaries.iter().all(RunSummary::ok)
    }
}

/// Runs every configuration (in parallel), writing `<name>.csv` per
/// successful run and `summary.json` for all of them into `out_dir`.
pub fn compare(configs: &[TrainConfig], out_dir: &Path) -> Result<Comparison> {
    if configs.is_empty() {
        return Err(BonError::Usage("experiment list is empty".into()));
    }
    let mut seen = BTreeSet::new();
    let names: Vec<String> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let base = c.label();
            if seen.insert(base.clone()) {
                base
            } else {
                format!("{base}_{i}")
            }
        })
        .collect();
    for c in configs {
        c.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| BonError::Runtime(format!("creating {}: {e}", out_dir.display())))?;

    let results: Vec<(RunSummary, Option<PathBuf>)> = configs
        .par_iter()
        .zip(names.par_iter())
        .map(|(cfg, name)| {
            let cfg = TrainConfig {
                name: Some(name.clone()),
                ..cfg.clone()
            };
            let run = train(&cfg).and_then(|out| {
                let path = out_dir.join(format!("{name}.csv"));
                write_runlog(&out.log, &path)?;
                Ok((out, path))
            });
            match run {
                Ok((out, path)) => (RunSummary::from_output(&cfg, &out), Some(path)),
                Err(e) => {
                    log::error!("run {name} failed: {e}");
                    (RunSummary::failed(&cfg, &e), None)
                }
            }
        })
        .collect();
    let (summaries, paths): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let summary_path = out_dir.join("summary.json");
    write_json(&summaries, &summary_path)?;
    Ok(Comparison {
        summaries,
        csv_paths: paths.into_iter().flatten().collect(),
        summary_path,
    })
}
