//! Command implementations behind the `conceptda` binary. Every command
//! returns a process exit code and reports problems on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{generate, Dataset, ShiftSpec};
use crate::error::{Error, Result};
use crate::eval::svg::{line_chart, Series};
use crate::eval::{bound_audit, distribution_report, evaluate, intervention_curve, MetricsReport, ProbeConfig};
use crate::model::{ModelConfig, ModelParams};
use crate::trainer::{train, TrainConfig};
use crate::verify::{run_check, Check};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAINLOG: &str = "trainlog.csv";
pub const METRICS: &str = "metrics.csv";
pub const CURVE: &str = "intervention_curve.csv";
pub const REPORT_DIR: &str = "report";

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::NonFinite { .. } | Error::ProbeDiverged(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn finish(r: Result<i32>) -> i32 {
    r.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

/// Training config file: `{"train": {...}, "model": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    /// Data directory as given on the command line.
    pub data_dir: PathBuf,
    pub source_fingerprint: String,
    pub target_fingerprint: String,
    pub seed: u64,
    pub tool_version: String,
    /// Output files, relative to the run directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(run: &Path) -> Result<Self> {
        let path = run.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn load_split(&self, split: Split) -> Result<Dataset> {
        let ds = Dataset::load_csv(self.data_dir.join(split.file()))?;
        let want = match split {
            Split::Source => &self.source_fingerprint,
            Split::Target => &self.target_fingerprint,
        };
        if &ds.fingerprint() != want {
            return Err(Error::Config(format!("{} changed since training", split.file())));
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Source,
    Target,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Split::Source),
            "target" => Ok(Split::Target),
            _ => Err(Error::Config(format!("unknown split `{s}`, expected source or target"))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::Target => "target",
        }
    }

    fn file(self) -> &'static str {
        match self {
            Split::Source => "source.csv",
            Split::Target => "target.csv",
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes") + "\n"
}

pub fn cmd_gen(spec: &Path, n_source: usize, n_target: usize, seed: u64, out: &Path) -> i32 {
    finish((|| {
        let spec: ShiftSpec = read_json(spec)?;
        let (source, target) = generate(&spec, n_source, n_target, seed)?;
        create_dir(out)?;
        source.save_csv(out.join("source.csv"))?;
        target.save_csv(out.join("target.csv"))?;
        write(&out.join("spec.json"), to_json(&spec))?;
        println!("wrote {} source and {} target rows to {}", source.len(), target.len(), out.display());
        Ok(EXIT_OK)
    })())
}

pub fn cmd_train(config: &Path, data: &Path, out: &Path) -> i32 {
    finish((|| {
        let cfg: RunConfig = read_json(config)?;
        cfg.train.validate()?;
        cfg.model.validate()?;
        let source = Dataset::load_csv(data.join("source.csv"))?;
        let target = Dataset::load_csv(data.join("target.csv"))?;
        let manifest = RunManifest {
            seed: cfg.train.seed,
            config: cfg,
            data_dir: data.to_path_buf(),
            source_fingerprint: source.fingerprint(),
            target_fingerprint: target.fingerprint(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: [MANIFEST, CHECKPOINT, TRAINLOG].map(String::from).to_vec(),
        };
        create_dir(out)?;
        write(&out.join(MANIFEST), to_json(&manifest))?;
        let (params, log) = train::<f64>(&source, &target, &manifest.config.train, &manifest.config.model)?;
        params.save_checkpoint(out.join(CHECKPOINT))?;
        write(&out.join(TRAINLOG), log.to_csv_string())?;
        if let Some(last) = log.records.last() {
            println!(
                "epoch {}: source acc {:.4}, target acc {:.4}, L_d {:.4}",
                last.epoch, last.source.class_acc, last.target.class_acc, last.l_d
            );
        }
        println!("run written to {}", out.display());
        Ok(EXIT_OK)
    })())
}

fn load_run(run: &Path) -> Result<(RunManifest, ModelParams<f64>)> {
    let ckpt = run.join(CHECKPOINT);
    if !ckpt.is_file() {
        return Err(Error::Config(format!("no checkpoint at {}", ckpt.display())));
    }
    let manifest = RunManifest::load(run)?;
    let params = ModelParams::load_checkpoint(&ckpt)?;
    Ok((manifest, params))
}

const METRICS_HEADER: &str = "split,class_acc,concept_acc,concept_f1,n";

fn metrics_row(split: Split, m: &MetricsReport) -> String {
    format!("{},{:.6},{:.6},{:.6},{}", split.as_str(), m.class_acc, m.concept_acc, m.concept_f1, m.n)
}

/// Replace this split's row in `metrics.csv`, keeping rows for other splits.
fn update_metrics(path: &Path, split: Split, m: &MetricsReport) -> Result<()> {
    let mut rows: Vec<String> = match fs::read_to_string(path) {
        Ok(text) => text.lines().skip(1).filter(|l| !l.starts_with(&format!("{},", split.as_str()))).map(String::from).collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    rows.push(metrics_row(split, m));
    rows.sort();
    write(path, format!("{METRICS_HEADER}\n{}\n", rows.join("\n")))
}

pub fn cmd_eval(run: &Path, split: &str, intervene: Option<&[f64]>) -> i32 {
    finish((|| {
        let split = Split::parse(split)?;
        let (manifest, params) = load_run(run)?;
        let ds = manifest.load_split(split)?;
        let m = evaluate(&params, &ds)?;
        update_metrics(&run.join(METRICS), split, &m)?;
        println!("{}: class acc {:.4}, concept acc {:.4}, concept F1 {:.4}", split.as_str(), m.class_acc, m.concept_acc, m.concept_f1);
        if let Some(ratios) = intervene {
            let curve = intervention_curve(&params, &ds, ratios, manifest.seed)?;
            write(&run.join(CURVE), curve.to_csv_string())?;
            let svg = line_chart(
                "concept intervention",
                "ratio of intervened concepts",
                &[
                    Series { name: "class accuracy", xs: &curve.ratios, ys: &curve.class_acc },
                    Series { name: "concept accuracy", xs: &curve.ratios, ys: &curve.concept_acc },
                ],
            );
            write(&run.join("intervention_curve.svg"), svg)?;
            for ((r, a), c) in curve.ratios.iter().zip(&curve.class_acc).zip(&curve.concept_acc) {
                println!("ratio {r:.2}: class acc {a:.4}, concept acc {c:.4}");
            }
        }
        Ok(EXIT_OK)
    })())
}

pub fn cmd_report(run: &Path) -> i32 {
    finish((|| {
        let (manifest, params) = load_run(run)?;
        if !run.join(METRICS).is_file() {
            return Err(Error::Config(format!("{} has no {METRICS}; run eval first", run.display())));
        }
        let source = manifest.load_split(Split::Source)?;
        let target = manifest.load_split(Split::Target)?;
        let report = distribution_report(&params, &source, &target)?;
        let dir = run.join(REPORT_DIR);
        report.write(&dir)?;
        let probe = ProbeConfig { seed: manifest.seed, ..ProbeConfig::default() };
        let audit = bound_audit(&params, &source, &target, &probe)?;
        write(&dir.join("bound_audit.csv"), audit.to_csv_string())?;
        println!(
            "mean target c_hat vs ground-truth JSD {:.4}; report written to {}",
            report.mean_target_vs_truth(),
            dir.display()
        );
        Ok(EXIT_OK)
    })())
}

pub fn cmd_verify(check: &str, seed: u64) -> i32 {
    finish((|| {
        let check: Check = check.parse()?;
        let report = run_check(check, seed)?;
        println!("{report}");
        Ok(if report.passed() { EXIT_OK } else { EXIT_VERIFY })
    })())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let io = Error::io("x", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(exit_code(&io), EXIT_IO);
        assert_eq!(exit_code(&Error::NonFinite { op: "add".into(), epoch: 0, step: 1 }), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Config("bad".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Spec("bad".into())), EXIT_USAGE);
    }

    #[test]
    fn metrics_rows_are_replaced_per_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS);
        let m = |acc: f64| MetricsReport { class_acc: acc, concept_acc: 0.5, concept_f1: 0.5, n: 4 };
        update_metrics(&path, Split::Target, &m(0.25)).unwrap();
        update_metrics(&path, Split::Source, &m(0.5)).unwrap();
        update_metrics(&path, Split::Target, &m(0.75)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("source,0.500000"));
        assert!(lines[2].starts_with("target,0.750000"));
    }
}
