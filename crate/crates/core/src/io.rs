//! File formats: series CSV, subset JSON, run-record JSONL (gzip), summary
//! and report CSV, JSON configs.
//!
//! All writers are deterministic: fixed column orders, shortest round-trip
//! float formatting, no wall-clock fields. Byte-identical reruns are part of
//! the contract.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::diagnostics::ResidualReport;
use crate::ensemble::{EnsembleSummary, RunConfig, RunRecord};
use crate::error::{Error, Result};
use crate::mg::AgentType;
use crate::series::PriceSeries;
use crate::synth::SynthSpec;

/// Serialized agent subset: `{"m": .., "types": [[a, b], ..], "seed": ..}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetFile {
    pub m: u8,
    pub types: Vec<[u32; 2]>,
    pub seed: u64,
}

impl SubsetFile {
    pub fn from_types(types: &[AgentType], seed: u64) -> Result<Self> {
        let m = types
            .first()
            .map(|t| t.memory())
            .ok_or_else(|| Error::InvalidInput("empty subset".into()))?;
        Ok(Self { m, types: types.iter().map(|t| t.tables()).collect(), seed })
    }

    pub fn to_types(&self) -> Result<Vec<AgentType>> {
        self.types.iter().map(|&[a, b]| AgentType::from_tables(self.m, a, b)).collect()
    }
}

pub fn save_subset_json(path: impl AsRef<Path>, subset: &SubsetFile) -> Result<()> {
    write_json_pretty(path, subset)
}

pub fn load_subset_json(path: impl AsRef<Path>) -> Result<SubsetFile> {
    read_json(path)
}

/// Load a `timestamp,rate` CSV, rejecting malformed or non-positive rates
/// with their line numbers.
pub fn load_series_csv(path: impl AsRef<Path>) -> Result<PriceSeries> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    {
        let headers = reader.headers()?;
        if headers.len() != 2 || &headers[0] != "timestamp" || &headers[1] != "rate" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header 'timestamp,rate', got '{}'", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
    }
    let mut rates = Vec::new();
    let mut timestamps = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 2 {
            return Err(Error::Parse { line, msg: format!("expected 2 fields, got {}", record.len()) });
        }
        let rate: f64 = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("rate '{}' is not a number", &record[1]) })?;
        if !rate.is_finite() || rate <= 0.0 {
            return Err(Error::Parse { line, msg: format!("rate {rate} must be positive") });
        }
        timestamps.push(record[0].to_string());
        rates.push(rate);
    }
    if rates.is_empty() {
        return Err(Error::InvalidInput("series file contains no rows".into()));
    }
    PriceSeries::with_timestamps(rates, timestamps)
}

/// Write a series as `timestamp,rate`; missing timestamps become indices.
pub fn save_series_csv(path: impl AsRef<Path>, series: &PriceSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["timestamp", "rate"])?;
    for (i, &rate) in series.rates().iter().enumerate() {
        let ts = series
            .timestamps()
            .map(|t| t[i].clone())
            .unwrap_or_else(|| i.to_string());
        w.write_record(&[ts, format_float(rate)])?;
    }
    w.flush()?;
    Ok(())
}

/// Ensemble summary CSV: `k,z,z_star,s_star,sem`.
pub fn write_summary_csv(path: impl AsRef<Path>, summary: &EnsembleSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["k", "z", "z_star", "s_star", "sem"])?;
    for i in 0..summary.len() {
        w.write_record(&[
            summary.ks[i].to_string(),
            format_float(summary.z_obs[i]),
            format_float(summary.z_star[i]),
            format_float(summary.s_star[i]),
            format_float(summary.sem[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: impl AsRef<Path>) -> Result<EnsembleSummary> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let mut summary = EnsembleSummary {
        ks: vec![],
        z_obs: vec![],
        z_star: vec![],
        s_star: vec![],
        sem: vec![],
        runs_used: 0,
        runs_flagged: 0,
    };
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("bad number '{}'", &record[i]) })
        };
        summary
            .ks
            .push(record[0].parse().map_err(|_| Error::Parse { line, msg: "bad k".into() })?);
        summary.z_obs.push(field(1)?);
        summary.z_star.push(field(2)?);
        summary.s_star.push(field(3)?);
        summary.sem.push(field(4)?);
    }
    Ok(summary)
}

/// Residual report CSV: `k,l,l_hat,l_tilde,var,band`.
pub fn write_report_csv(path: impl AsRef<Path>, report: &ResidualReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["k", "l", "l_hat", "l_tilde", "var", "band"])?;
    for s in &report.steps {
        w.write_record(&[
            s.k.to_string(),
            format_float(s.log_return),
            format_float(s.log_return_pred),
            format_float(s.residual),
            format_float(s.variance),
            format_float(s.band),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// JSON report summary (coverage, bias indicator, accuracy, flags).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub coverage: crate::diagnostics::CoverageTable,
    pub directional_accuracy: f64,
    pub flagged_steps: usize,
    pub steps: usize,
}

pub fn write_report_json(path: impl AsRef<Path>, report: &ResidualReport) -> Result<()> {
    let summary = ReportSummary {
        coverage: report.coverage.clone(),
        directional_accuracy: report.directional_accuracy,
        flagged_steps: report.flagged_steps,
        steps: report.steps.len(),
    };
    write_json_pretty(path, &summary)
}

/// Metadata stored next to the run records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunDirMeta {
    pub config: RunConfig,
    pub runs_used: usize,
    pub runs_flagged: usize,
    pub flags: Vec<String>,
}

const SUMMARY_FILE: &str = "summary.csv";
const SERIES_FILE: &str = "series.csv";
const META_FILE: &str = "meta.json";

/// Persist a full inference: summary CSV, a copy of the series, per-run
/// gzipped JSONL records and a metadata file. Returns the record paths.
pub fn write_run_dir(
    dir: impl AsRef<Path>,
    series: &PriceSeries,
    summary: &EnsembleSummary,
    records: &[RunRecord],
    config: &RunConfig,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_summary_csv(dir.join(SUMMARY_FILE), summary)?;
    save_series_csv(dir.join(SERIES_FILE), series)?;
    let meta = RunDirMeta {
        config: config.clone(),
        runs_used: summary.runs_used,
        runs_flagged: summary.runs_flagged,
        flags: records.iter().filter_map(|r| r.flag.clone()).collect(),
    };
    write_json_pretty(dir.join(META_FILE), &meta)?;

    let mut paths = Vec::with_capacity(records.len());
    for record in records {
        let path = dir.join(format!("run_{:04}.jsonl.gz", record.run_index));
        write_run_record(&path, record)?;
        paths.push(path);
    }
    Ok(paths)
}

/// One gzipped JSONL file per run: a header line with the run identity,
/// then one line per step.
pub fn write_run_record(path: impl AsRef<Path>, record: &RunRecord) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = GzEncoder::new(BufWriter::new(file), Compression::default());
    #[derive(Serialize)]
    struct Header<'a> {
        run_index: usize,
        seed: u64,
        memory: u8,
        subset: &'a [[u32; 2]],
        flag: &'a Option<String>,
        steps: usize,
    }
    let header = Header {
        run_index: record.run_index,
        seed: record.seed,
        memory: record.memory,
        subset: &record.subset,
        flag: &record.flag,
        steps: record.steps.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for step in &record.steps {
        serde_json::to_writer(&mut w, step)?;
        w.write_all(b"\n")?;
    }
    w.finish()?.flush()?;
    Ok(())
}

pub fn read_run_record(path: impl AsRef<Path>) -> Result<RunRecord> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(GzDecoder::new(file));
    let mut lines = reader.lines();
    #[derive(Deserialize)]
    struct Header {
        run_index: usize,
        seed: u64,
        memory: u8,
        subset: Vec<[u32; 2]>,
        flag: Option<String>,
    }
    let first = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty run record".into()))??;
    let header: Header = serde_json::from_str(&first)?;
    let mut steps = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        steps.push(serde_json::from_str(&line)?);
    }
    Ok(RunRecord {
        run_index: header.run_index,
        seed: header.seed,
        memory: header.memory,
        subset: header.subset,
        steps,
        flag: header.flag,
    })
}

/// Load everything `report` needs back from a run directory.
pub fn read_run_dir(dir: impl AsRef<Path>) -> Result<(PriceSeries, EnsembleSummary, RunDirMeta)> {
    let dir = dir.as_ref();
    let series = load_series_csv(dir.join(SERIES_FILE))?;
    let mut summary = read_summary_csv(dir.join(SUMMARY_FILE))?;
    let meta: RunDirMeta = read_json(dir.join(META_FILE))?;
    summary.runs_used = meta.runs_used;
    summary.runs_flagged = meta.runs_flagged;
    Ok((series, summary, meta))
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    read_json(path)
}

pub fn save_run_config(path: impl AsRef<Path>, cfg: &RunConfig) -> Result<()> {
    write_json_pretty(path, cfg)
}

pub fn load_synth_spec(path: impl AsRef<Path>) -> Result<SynthSpec> {
    read_json(path)
}

pub fn save_synth_spec(path: impl AsRef<Path>, spec: &SynthSpec) -> Result<()> {
    write_json_pretty(path, spec)
}

/// Truth log as JSON lines: a header, then one line per step.
pub fn write_truth_jsonl(path: impl AsRef<Path>, log: &crate::synth::TruthLog) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    #[derive(Serialize)]
    struct Header<'a> {
        memory: u8,
        horizon: usize,
        types: &'a [[u32; 2]],
        weights: &'a [f64],
        sigma_used: f64,
        initial_history: &'a [i8],
    }
    serde_json::to_writer(
        &mut w,
        &Header {
            memory: log.memory,
            horizon: log.horizon,
            types: &log.types,
            weights: &log.weights,
            sigma_used: log.sigma_used,
            initial_history: &log.initial_history,
        },
    )?;
    w.write_all(b"\n")?;
    for step in &log.steps {
        serde_json::to_writer(&mut w, step)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json_pretty<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let file = File::open(path.as_ref())?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Shortest round-trip decimal formatting, stable across runs.
fn format_float(v: f64) -> String {
    let mut buf = ryu_format(v);
    // Trim "X.0" to keep integers compact but unambiguous.
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // serde_json uses ryu internally; route through it for identical bytes.
    serde_json::to_string(&v).unwrap_or_else(|_| v.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{orchestrate, RunConfig};
    use crate::synth::{generate_synthetic, SynthSpec};
    use tempfile::tempdir;

    #[test]
    fn series_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("series.csv");
        let series = PriceSeries::with_timestamps(
            vec![100.0, 100.5],
            vec!["t0".into(), "t1".into()],
        )
        .unwrap();
        save_series_csv(&path, &series).unwrap();
        let loaded = load_series_csv(&path).unwrap();
        assert_eq!(loaded, series);
        assert_eq!(loaded.increment(1), 0.5);

        // Save/load/save is byte-stable.
        let path2 = dir.path().join("series2.csv");
        save_series_csv(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_rate_reports_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "timestamp,rate\n0,100.0\n1,-3\n").unwrap();
        let err = load_series_csv(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }

        std::fs::write(&path, "timestamp,rate\n0,abc\n").unwrap();
        assert!(matches!(load_series_csv(&path), Err(Error::Parse { line: 2, .. })));

        std::fs::write(&path, "time,rate\n0,1.0\n").unwrap();
        assert!(matches!(load_series_csv(&path), Err(Error::Parse { line: 1, .. })));

        std::fs::write(&path, "timestamp,rate\n").unwrap();
        assert!(load_series_csv(&path).is_err());
    }

    #[test]
    fn subset_json_shape() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("subset.json");
        let types = crate::mg::sample_agent_subset(2, 3, 5).unwrap();
        let subset = SubsetFile::from_types(&types, 5).unwrap();
        save_subset_json(&path, &subset).unwrap();

        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw["m"], 2);
        assert_eq!(raw["seed"], 5);
        assert_eq!(raw["types"].as_array().unwrap().len(), 3);
        assert_eq!(raw["types"][0].as_array().unwrap().len(), 2);

        let loaded = load_subset_json(&path).unwrap();
        assert_eq!(loaded.to_types().unwrap(), types);
    }

    #[test]
    fn summary_csv_round_trip_and_header() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        let summary = EnsembleSummary {
            ks: vec![13, 14],
            z_obs: vec![1.0, -0.25],
            z_star: vec![0.5, -0.125],
            s_star: vec![2.0, 2.5],
            sem: vec![0.1, 0.0],
            runs_used: 4,
            runs_flagged: 0,
        };
        write_summary_csv(&path, &summary).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("k,z,z_star,s_star,sem\n"));
        let loaded = read_summary_csv(&path).unwrap();
        assert_eq!(loaded.ks, summary.ks);
        assert_eq!(loaded.z_obs, summary.z_obs);
        assert_eq!(loaded.z_star, summary.z_star);
        assert_eq!(loaded.s_star, summary.s_star);
        assert_eq!(loaded.sem, summary.sem);
    }

    #[test]
    fn run_dir_round_trip() {
        let spec = SynthSpec::planted(2, 8, 3, &[0.5, 0.3, 0.2], 0.1, 220, 3);
        let (series, _) = generate_synthetic(&spec).unwrap();
        let cfg = RunConfig { memory: 2, subset_size: 3, horizon: 8, runs: 3, seed: 1, ..RunConfig::default() };
        let (summary, records) = orchestrate(&series, &cfg).unwrap();

        let dir = tempdir().unwrap();
        let paths = write_run_dir(dir.path(), &series, &summary, &records, &cfg).unwrap();
        assert_eq!(paths.len(), 3);

        let (series2, summary2, meta) = read_run_dir(dir.path()).unwrap();
        assert_eq!(series2.rates(), series.rates());
        assert_eq!(summary2.ks, summary.ks);
        assert_eq!(summary2.z_star, summary.z_star);
        assert_eq!(meta.config, cfg);
        assert_eq!(meta.runs_used, 3);

        let rec = read_run_record(&paths[1]).unwrap();
        assert_eq!(rec, records[1]);
    }

    #[test]
    fn truth_log_lines() {
        let spec = SynthSpec::planted(2, 5, 2, &[0.7, 0.3], 0.1, 60, 9);
        let (_, log) = generate_synthetic(&spec).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("truth.jsonl");
        write_truth_jsonl(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + log.steps.len());
        let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(header["memory"], 2);
    }

    #[test]
    fn run_config_json_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut cfg = RunConfig::default();
        cfg.bias = crate::bias::BiasMode::Measurement { noise: 0.0 };
        cfg.runs = 25;
        save_run_config(&path, &cfg).unwrap();
        let loaded = load_run_config(&path).unwrap();
        assert_eq!(loaded, cfg);

        // Sparse configs deserialize through the defaults.
        std::fs::write(&path, r#"{"memory": 2, "runs": 5}"#).unwrap();
        let sparse = load_run_config(&path).unwrap();
        assert_eq!(sparse.memory, 2);
        assert_eq!(sparse.runs, 5);
        assert_eq!(sparse.horizon, RunConfig::default().horizon);
    }
}
