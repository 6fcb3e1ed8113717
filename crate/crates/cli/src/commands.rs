//! The `invert`, `reconstruct`, `edit`, `sample`, `mi-curve` and `sweep`
//! commands. Each builds a [`Report`] in memory; [`Report::write`] puts its
//! files and a provenance sidecar into the output directory.

use std::path::{Path, PathBuf};

use dice_core::analysis::{compute_edit_metrics, mi_curve, mi_monte_carlo, summarize, EditMetrics, EditSummary};
use dice_core::dice::{EditParams, InversionRecord, Strategy};
use dice_core::rng::{purpose, trial_stream};
use dice_core::schedules::LambdaSchedule;
use dice_core::tokens::{write_token_text, TokenSeq};
use dice_core::{RngStream, SeedProvenance};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::experiment::{load_record, record_bytes, Experiment};

pub const RECORD_FILE: &str = "record.dice";

const STREAM_SCHEME: &str =
    "stream = trial << 8 | purpose; source=1 plan=2 trajectory=3 edit=4 sample=5 analysis=6";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub trials: usize,
    pub stream_scheme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub record_seeds: Vec<SeedProvenance>,
    /// Source sequence of an inversion, kept so a record can be scored later.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Vec<usize>>,
    pub outputs: Vec<String>,
}

impl Provenance {
    fn new(command: &str, cfg: &ExperimentConfig, config_hash: String) -> Self {
        Self {
            tool: format!("dice {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            config_sha256: config_hash,
            seed: cfg.seed,
            trials: cfg.trials,
            stream_scheme: STREAM_SCHEME.into(),
            record_sha256: None,
            record_seeds: Vec::new(),
            source: None,
            outputs: Vec::new(),
        }
    }

    fn with_record(mut self, record: &InversionRecord, bytes: &[u8]) -> Self {
        self.record_sha256 = Some(hex(&Sha256::digest(bytes)));
        self.record_seeds = record.seeds().to_vec();
        self
    }
}

pub struct Report {
    pub provenance: Provenance,
    /// `(file name, contents)` in write order.
    pub files: Vec<(String, Vec<u8>)>,
    /// One-line summary for stdout.
    pub message: String,
}

impl Report {
    fn new(provenance: Provenance, message: String) -> Self {
        Self {
            provenance,
            files: Vec::new(),
            message,
        }
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.provenance.outputs.push(name.to_string());
        self.files.push((name.to_string(), bytes));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.add(name, text.into_bytes());
    }

    pub fn sidecar_name(&self) -> String {
        if self.provenance.command == "invert" {
            sidecar_for(Path::new(RECORD_FILE)).display().to_string()
        } else {
            format!("{}.provenance.json", self.provenance.command)
        }
    }

    pub fn sidecar(&self) -> Vec<u8> {
        let mut text = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        text.push('\n');
        text.into_bytes()
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    /// Writes every file and the sidecar into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> CliResult<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        let mut written = Vec::new();
        let sidecar = (self.sidecar_name(), self.sidecar());
        for (name, bytes) in self.files.iter().chain(std::iter::once(&sidecar)) {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| CliError::io(path.display(), e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// `record.dice` -> `record.provenance.json`.
pub fn sidecar_for(record: &Path) -> PathBuf {
    record.with_extension("provenance.json")
}

fn par_trials<T: Send>(n: usize, f: impl Fn(usize) -> CliResult<T> + Sync + Send) -> CliResult<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

pub fn invert(exp: &Experiment) -> CliResult<Report> {
    let x0 = exp.source(0)?;
    let record = exp.invert(&x0, 0)?;
    let bytes = record_bytes(&record)?;
    let mut prov = Provenance::new("invert", &exp.cfg, exp.config_hash.clone()).with_record(&record, &bytes);
    prov.trials = 1;
    prov.source = Some(x0.tokens().to_vec());
    let message = format!(
        "inverted '{}' under {} ({} steps, {} family)",
        exp.render(&x0),
        exp.condition_name(record.condition()),
        record.steps(),
        record.family().name()
    );
    let mut report = Report::new(prov, message);
    report.add(RECORD_FILE, bytes);
    Ok(report)
}

/// The reference source for a stored record: its inversion sidecar, then the
/// config's `source`, then (masked models) the argmax of the clean logits.
fn record_source(exp: &Experiment, record_path: &Path, record: &InversionRecord) -> CliResult<TokenSeq> {
    let vocab = record.data_vocab();
    let sidecar = sidecar_for(record_path);
    if let Ok(text) = std::fs::read_to_string(&sidecar) {
        let prov: Provenance = serde_json::from_str(&text).map_err(|e| CliError::io(sidecar.display(), e))?;
        if let Some(src) = prov.source {
            return Ok(TokenSeq::new(src, vocab)?);
        }
    }
    if let Some(src) = &exp.cfg.source {
        return Ok(TokenSeq::new(src.clone(), vocab)?);
    }
    if let Some(y0) = record.clean_logits() {
        return Ok(TokenSeq::new(y0.argmax_rows(), vocab)?);
    }
    Err(CliError::Config(format!(
        "no reference source for {}: expected {} or a `source` config key",
        record_path.display(),
        sidecar.display()
    )))
}

/// One source and its inversion per trial, or the stored record for every
/// trial.
struct Sources {
    stored: Option<(InversionRecord, TokenSeq, Vec<u8>)>,
}

impl Sources {
    fn open(exp: &Experiment, record_path: Option<&Path>) -> CliResult<Self> {
        let stored = match record_path {
            Some(path) => {
                let (record, bytes) = load_record(path)?;
                exp.check_record(&record)?;
                let x0 = record_source(exp, path, &record)?;
                Some((record, x0, bytes))
            }
            None => None,
        };
        Ok(Self { stored })
    }

    fn get(&self, exp: &Experiment, trial: usize) -> CliResult<(TokenSeq, std::borrow::Cow<'_, InversionRecord>)> {
        match &self.stored {
            Some((rec, x0, _)) => Ok((x0.clone(), std::borrow::Cow::Borrowed(rec))),
            None => {
                let x0 = exp.source(trial)?;
                let rec = exp.invert(&x0, trial)?;
                Ok((x0, std::borrow::Cow::Owned(rec)))
            }
        }
    }

    fn provenance(&self, command: &str, exp: &Experiment) -> Provenance {
        let prov = Provenance::new(command, &exp.cfg, exp.config_hash.clone());
        match &self.stored {
            Some((rec, _, bytes)) => prov.with_record(rec, bytes),
            None => prov,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructReport {
    pub mode: String,
    pub family: String,
    pub trials: usize,
    pub accuracy: f64,
    pub mean_hamming: f64,
    pub hamming: Vec<f64>,
}

pub fn reconstruct(exp: &Experiment, record_path: Option<&Path>) -> CliResult<Report> {
    let sources = Sources::open(exp, record_path)?;
    let baseline = exp.cfg.baseline;
    let results = par_trials(exp.cfg.trials, |trial| {
        let (x0, rec) = sources.get(exp, trial)?;
        let params = if baseline {
            EditParams::resample(rec.condition())
        } else {
            EditParams {
                strategy: exp.cfg.strategy,
                ..EditParams::reconstruction(rec.condition())
            }
        };
        let out = exp.edit(&rec, &params, trial)?;
        Ok((out == x0, x0.hamming_similarity(&out)?))
    })?;
    let n = results.len() as f64;
    let body = ReconstructReport {
        mode: if baseline { "inpaint-baseline" } else { "inversion" }.into(),
        family: exp.cfg.family.name().into(),
        trials: results.len(),
        accuracy: results.iter().filter(|r| r.0).count() as f64 / n,
        mean_hamming: results.iter().map(|r| r.1).sum::<f64>() / n,
        hamming: results.iter().map(|r| r.1).collect(),
    };
    let message = format!(
        "{} reconstruction ({}): accuracy {:.4} over {} trials, mean hamming {:.4}",
        body.family, body.mode, body.accuracy, body.trials, body.mean_hamming
    );
    let mut report = Report::new(sources.provenance("reconstruct", exp), message);
    report.add_json("reconstruct.json", &body);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub family: String,
    pub params: EditParams,
    pub summary: EditSummary,
    pub per_trial: Vec<EditMetrics>,
}

fn residual_free(params: &EditParams) -> EditParams {
    EditParams {
        lambdas: LambdaSchedule::constant(0.0, 1.0),
        strategy: Strategy::Linear,
        ..*params
    }
}

pub fn edit(exp: &Experiment, record_path: Option<&Path>) -> CliResult<Report> {
    let sources = Sources::open(exp, record_path)?;
    let params = exp.cfg.edit_params();
    let model = exp.fixture.fixture.data_model();
    let (src, tgt) = (exp.cfg.source_label, exp.cfg.target_label);
    let results = par_trials(exp.cfg.trials, |trial| {
        let (x0, rec) = sources.get(exp, trial)?;
        let out = exp.edit(&rec, &params, trial)?;
        let base = exp.edit(&rec, &residual_free(&params), trial)?;
        let metrics = compute_edit_metrics(&x0, &out, model, src, tgt)?;
        Ok((out, metrics, x0.hamming_similarity(&base)?))
    })?;
    let per_trial: Vec<EditMetrics> = results.iter().map(|r| r.1).collect();
    let mut summary = summarize(&per_trial);
    summary.preservation_baseline = Some(results.iter().map(|r| r.2).sum::<f64>() / results.len() as f64);
    let outputs: Vec<TokenSeq> = results.into_iter().map(|r| r.0).collect();
    let message = format!(
        "edit {} -> {}: hamming {:.4} (residual-free {:.4}), edit success {:.4} over {} trials",
        exp.condition_name(exp.cfg.source_condition()),
        exp.condition_name(exp.cfg.target_condition()),
        summary.hamming_similarity,
        summary.preservation_baseline.unwrap_or(f64::NAN),
        summary.edit_success,
        summary.trials
    );
    let body = EditReport {
        family: exp.cfg.family.name().into(),
        params,
        summary,
        per_trial,
    };
    let mut report = Report::new(sources.provenance("edit", exp), message);
    report.add_json("edit.json", &body);
    report.add("edit_outputs.txt", write_token_text(&outputs).into_bytes());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub family: String,
    pub trials: usize,
    pub target_preferred: f64,
    pub distinct: usize,
}

pub fn sample(exp: &Experiment, record_path: Option<&Path>) -> CliResult<Report> {
    let sources = Sources::open(exp, record_path)?;
    let stored = sources.stored.as_ref().map(|(rec, _, _)| rec);
    let outputs = par_trials(exp.cfg.trials, |trial| exp.plain_sample(stored, trial))?;
    let preferred = outputs
        .iter()
        .map(|x| exp.prefers_target(x))
        .collect::<CliResult<Vec<bool>>>()?;
    let distinct = outputs.iter().map(|x| x.tokens()).collect::<std::collections::BTreeSet<_>>().len();
    let body = SampleReport {
        family: exp.cfg.family.name().into(),
        trials: outputs.len(),
        target_preferred: preferred.iter().filter(|&&p| p).count() as f64 / outputs.len() as f64,
        distinct,
    };
    let message = format!(
        "{} samples under {}: {} distinct, target preferred {:.4}",
        body.trials,
        exp.condition_name(exp.cfg.target_condition()),
        body.distinct,
        body.target_preferred
    );
    let mut report = Report::new(sources.provenance("sample", exp), message);
    report.add_json("samples.json", &body);
    report.add("samples.txt", write_token_text(&outputs).into_bytes());
    Ok(report)
}

/// Needs no fixture; only the DDPM and Monte Carlo keys matter.
pub fn mi_curve_report(cfg: &ExperimentConfig) -> CliResult<Report> {
    cfg.validate()?;
    let sched = cfg.ddpm_schedule()?;
    let mut curve = mi_curve(&sched, cfg.mi_dim, None)?;
    if cfg.mi_mc_samples > 0 {
        let steps: Vec<usize> = if cfg.mi_mc_at.is_empty() {
            (1..=cfg.mi_steps).collect()
        } else {
            cfg.mi_mc_at.clone()
        };
        let values = steps
            .par_iter()
            .map(|&t| {
                let mut rng = RngStream::new(cfg.seed, trial_stream(t as u64, purpose::ANALYSIS));
                Ok(cfg.mi_dim as f64 * mi_monte_carlo(&sched, t, cfg.mi_mc_samples, &mut rng)?)
            })
            .collect::<CliResult<Vec<f64>>>()?;
        for (t, v) in steps.into_iter().zip(values) {
            curve.points[t - 1].monte_carlo = Some(v);
        }
    }
    let hash = cfg.hash(None);
    let mut prov = Provenance::new("mi-curve", cfg, hash.clone());
    prov.trials = cfg.mi_mc_samples;
    let message = format!(
        "mutual information over {} steps (D={}): {:.6e} nats at t=1, {:.6e} at t={}",
        cfg.mi_steps,
        cfg.mi_dim,
        curve.points[0].nats,
        curve.points[cfg.mi_steps - 1].nats,
        cfg.mi_steps
    );
    let csv = curve.to_csv(&format!("dice mi-curve config_sha256={hash} seed={}", cfg.seed));
    let mut report = Report::new(prov, message);
    report.add("mi_curve.csv", csv.into_bytes());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda1: f64,
    pub lambda2: f64,
    pub hamming_similarity: f64,
    pub edit_success: f64,
    pub token_accuracy: f64,
}

/// `lambda_1` over the configured grid with `lambda_2 = 1 - lambda_1`, the
/// same sources and records for every row.
pub fn sweep(exp: &Experiment, record_path: Option<&Path>) -> CliResult<Report> {
    let sources = Sources::open(exp, record_path)?;
    let grid = exp.cfg.sweep_lambda1.clone();
    let base = exp.cfg.edit_params();
    let model = exp.fixture.fixture.data_model();
    let (src, tgt) = (exp.cfg.source_label, exp.cfg.target_label);
    let per_trial = par_trials(exp.cfg.trials, |trial| {
        let (x0, rec) = sources.get(exp, trial)?;
        grid.iter()
            .map(|&l1| {
                let params = EditParams {
                    lambdas: LambdaSchedule {
                        lambda1: l1,
                        lambda2: complement(l1),
                        ..base.lambdas
                    },
                    ..base
                };
                let out = exp.edit(&rec, &params, trial)?;
                Ok(compute_edit_metrics(&x0, &out, model, src, tgt)?)
            })
            .collect::<CliResult<Vec<EditMetrics>>>()
    })?;
    let rows: Vec<SweepRow> = grid
        .iter()
        .enumerate()
        .map(|(i, &l1)| {
            let column: Vec<EditMetrics> = per_trial.iter().map(|m| m[i]).collect();
            let s = summarize(&column);
            SweepRow {
                lambda1: l1,
                lambda2: complement(l1),
                hamming_similarity: s.hamming_similarity,
                edit_success: s.edit_success,
                token_accuracy: s.token_accuracy,
            }
        })
        .collect();
    let mut csv = format!(
        "# dice sweep config_sha256={} seed={} trials={} tau={}\n",
        exp.config_hash, exp.cfg.seed, exp.cfg.trials, exp.cfg.tau
    );
    csv.push_str("lambda1,lambda2,hamming_similarity,edit_success,token_accuracy\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.lambda1, r.lambda2, r.hamming_similarity, r.edit_success, r.token_accuracy
        ));
    }
    let message = rows
        .iter()
        .map(|r| format!("l1={} hamming={:.4} success={:.4}", r.lambda1, r.hamming_similarity, r.edit_success))
        .collect::<Vec<_>>()
        .join("; ");
    let mut report = Report::new(sources.provenance("sweep", exp), message);
    report.add("sweep.csv", csv.into_bytes());
    report.add_json("sweep.json", &rows);
    Ok(report)
}

/// `1 - lambda_1` rounded to 12 decimals so grid values print cleanly.
fn complement(l1: f64) -> f64 {
    ((1.0 - l1) * 1e12).round() / 1e12
}
