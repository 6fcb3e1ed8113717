//! Experiment configuration files.
//!
//! A config is a flat TOML table with an explicit `version = 1`. Unknown keys
//! are rejected. Relative fixture paths resolve against the config file's
//! directory.

use std::path::{Path, PathBuf};

use clap::Args;
use dice_core::denoise::{Condition, CorruptionModel, Fixture};
use dice_core::dice::{CleanEstimate, EditParams, Family, MgmPlanParams, Strategy};
use dice_core::maskgen::NoiseMode;
use dice_core::schedules::{
    make_ddpm_schedule, make_vq_schedule, DiffusionSchedule, GaussianDdpmSchedule, LambdaDecay, LambdaSchedule,
    MaskCurve, MaskMode, MaskSchedule, VqPreset,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "DICE_OUT_DIR";

const DEFAULT_OUT_DIR: &str = "dice-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulePreset {
    MaskAndReplace,
    MaskOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub family: Family,
    pub fixture: Option<PathBuf>,
    /// Expected sequence length; checked against the fixture when set.
    pub seq_len: Option<usize>,
    /// Expected data vocabulary size; checked against the fixture when set.
    pub vocab_size: Option<usize>,
    pub steps: usize,
    pub seed: u64,
    pub trials: usize,
    pub source_label: u32,
    pub target_label: u32,
    /// Fixed source sequence; sampled from `source_label` per trial otherwise.
    pub source: Option<Vec<usize>>,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_decay: LambdaDecay,
    pub strategy: Strategy,
    pub cfg_scale: f64,
    pub clean_estimate: CleanEstimate,
    pub mask_curve: MaskCurve,
    pub mask_mode: MaskMode,
    pub noise: NoiseMode,
    pub schedule: SchedulePreset,
    pub keep_end: f64,
    pub mask_end: f64,
    /// Discard residuals and resample (reconstruct only).
    pub baseline: bool,
    pub sweep_lambda1: Vec<f64>,
    pub mi_steps: usize,
    pub mi_dim: usize,
    /// Monte Carlo samples per overlay point; 0 disables the overlay.
    pub mi_mc_samples: usize,
    /// Steps with a Monte Carlo overlay; empty means every step.
    pub mi_mc_at: Vec<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            family: Family::Mgm,
            fixture: None,
            seq_len: None,
            vocab_size: None,
            steps: 12,
            seed: 0,
            trials: 100,
            source_label: 0,
            target_label: 1,
            source: None,
            tau: 0.9,
            lambda1: 0.7,
            lambda2: 0.3,
            lambda_decay: LambdaDecay::Constant,
            strategy: Strategy::Linear,
            cfg_scale: 1.0,
            clean_estimate: CleanEstimate::Distribution,
            mask_curve: MaskCurve::Linear,
            mask_mode: MaskMode::Inclusive,
            noise: NoiseMode::RandomToken,
            schedule: SchedulePreset::MaskAndReplace,
            keep_end: 1e-5,
            mask_end: 0.9,
            baseline: false,
            sweep_lambda1: vec![0.0, 0.2, 0.5, 0.7, 1.0],
            mi_steps: 1000,
            mi_dim: 1,
            mi_mc_samples: 0,
            mi_mc_at: Vec::new(),
            out_dir: None,
        }
    }
}

/// Command-line overrides, one per config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true, value_parser = parse_family)]
    pub family: Option<Family>,
    #[arg(long, global = true)]
    pub fixture: Option<PathBuf>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    #[arg(long, global = true)]
    pub source_label: Option<u32>,
    #[arg(long, global = true)]
    pub target_label: Option<u32>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub lambda1: Option<f64>,
    #[arg(long, global = true)]
    pub lambda2: Option<f64>,
    #[arg(long, global = true, value_parser = parse_decay)]
    pub lambda_decay: Option<LambdaDecay>,
    #[arg(long, global = true, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long, global = true)]
    pub cfg_scale: Option<f64>,
    #[arg(long, global = true, value_parser = parse_estimate)]
    pub clean_estimate: Option<CleanEstimate>,
    #[arg(long, global = true, value_parser = parse_curve)]
    pub mask_curve: Option<MaskCurve>,
    #[arg(long, global = true, value_parser = parse_mask_mode)]
    pub mask_mode: Option<MaskMode>,
    #[arg(long, global = true, value_parser = parse_noise)]
    pub noise: Option<NoiseMode>,
    #[arg(long, global = true, value_enum)]
    pub schedule: Option<SchedulePreset>,
    #[arg(long, global = true)]
    pub keep_end: Option<f64>,
    #[arg(long, global = true)]
    pub mask_end: Option<f64>,
    #[arg(long, global = true)]
    pub baseline: bool,
    #[arg(long, global = true, value_delimiter = ',')]
    pub sweep_lambda1: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub mi_steps: Option<usize>,
    #[arg(long, global = true)]
    pub mi_dim: Option<usize>,
    #[arg(long, global = true)]
    pub mi_mc_samples: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub mi_mc_at: Option<Vec<usize>>,
    /// Output directory.
    #[arg(long = "out", global = true)]
    pub out_dir: Option<PathBuf>,
}

fn parse_kebab<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value '{s}'"))
}

fn parse_family(s: &str) -> Result<Family, String> {
    parse_kebab(s)
}

fn parse_decay(s: &str) -> Result<LambdaDecay, String> {
    parse_kebab(s)
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    parse_kebab(s)
}

fn parse_estimate(s: &str) -> Result<CleanEstimate, String> {
    parse_kebab(s)
}

fn parse_curve(s: &str) -> Result<MaskCurve, String> {
    parse_kebab(s)
}

fn parse_mask_mode(s: &str) -> Result<MaskMode, String> {
    parse_kebab(s)
}

fn parse_noise(s: &str) -> Result<NoiseMode, String> {
    parse_kebab(s)
}

macro_rules! apply {
    ($cfg:ident, $ov:ident, $($field:ident),*) => {
        $(if let Some(v) = $ov.$field.clone() { $cfg.$field = v; })*
    };
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Reads `path`, resolving a relative fixture path against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(fixture) = &cfg.fixture {
            if fixture.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.fixture = Some(base.join(fixture));
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        apply!(
            self, ov, family, steps, seed, trials, source_label, target_label, tau, lambda1, lambda2, lambda_decay,
            strategy, cfg_scale, clean_estimate, mask_curve, mask_mode, noise, schedule, keep_end, mask_end,
            sweep_lambda1, mi_steps, mi_dim, mi_mc_samples, mi_mc_at
        );
        if let Some(f) = &ov.fixture {
            self.fixture = Some(f.clone());
        }
        if let Some(d) = &ov.out_dir {
            self.out_dir = Some(d.clone());
        }
        self.baseline |= ov.baseline;
    }

    /// Range checks that need no fixture.
    pub fn validate(&self) -> CliResult<()> {
        if self.steps == 0 {
            return Err(CliError::Config("steps must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(CliError::Config("trials must be at least 1".into()));
        }
        self.edit_params().validate().map_err(invalid)?;
        for &l1 in &self.sweep_lambda1 {
            if !(0.0..=1.0).contains(&l1) {
                return Err(CliError::Config(format!("sweep lambda1 {l1} outside [0, 1]")));
            }
        }
        if self.mi_steps < 2 {
            return Err(CliError::Config("mi_steps must be at least 2".into()));
        }
        if self.mi_dim == 0 {
            return Err(CliError::Config("mi_dim must be at least 1".into()));
        }
        if self.mi_mc_samples > 0 && self.mi_mc_samples < 2 {
            return Err(CliError::Config("mi_mc_samples must be 0 or at least 2".into()));
        }
        if let Some(&t) = self.mi_mc_at.iter().find(|&&t| t == 0 || t > self.mi_steps) {
            return Err(CliError::Config(format!("mi_mc_at step {t} outside 1..={}", self.mi_steps)));
        }
        Ok(())
    }

    pub fn source_condition(&self) -> Condition {
        Condition::Label(self.source_label)
    }

    pub fn target_condition(&self) -> Condition {
        Condition::Label(self.target_label)
    }

    pub fn lambdas(&self) -> LambdaSchedule {
        LambdaSchedule {
            decay: self.lambda_decay,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn edit_params(&self) -> EditParams {
        EditParams {
            tau: self.tau,
            lambdas: self.lambdas(),
            strategy: self.strategy,
            target: self.target_condition(),
            cfg_scale: self.cfg_scale,
            clean_estimate: self.clean_estimate,
        }
    }

    pub fn mask_schedule(&self) -> MaskSchedule {
        MaskSchedule::new(self.mask_curve, self.mask_mode)
    }

    pub fn plan_params(&self) -> MgmPlanParams {
        MgmPlanParams {
            schedule: self.mask_schedule(),
            noise: self.noise,
            steps: self.steps,
        }
    }

    pub fn vq_preset(&self) -> VqPreset {
        match self.schedule {
            SchedulePreset::MaskOnly => VqPreset::MaskOnly,
            SchedulePreset::MaskAndReplace => VqPreset::MaskAndReplace {
                keep_end: self.keep_end,
                mask_end: self.mask_end,
            },
        }
    }

    pub fn diffusion_schedule(&self, num_classes: usize) -> CliResult<DiffusionSchedule> {
        make_vq_schedule(self.steps, num_classes, self.vq_preset()).map_err(invalid)
    }

    pub fn ddpm_schedule(&self) -> CliResult<GaussianDdpmSchedule> {
        make_ddpm_schedule(self.mi_steps).map_err(invalid)
    }

    /// Output directory: the flag or config key, then the environment, then a
    /// fixed default.
    pub fn resolve_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    /// SHA-256 over the canonical JSON of the experiment parameters. The
    /// fixture enters by content and the output directory is left out, so the
    /// hash identifies the experiment rather than where it ran.
    pub fn hash(&self, fixture_text: Option<&str>) -> String {
        let mut canon = self.clone();
        canon.out_dir = None;
        canon.fixture = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canon).expect("config serializes"));
        if let Some(text) = fixture_text {
            h.update(b"\0fixture\0");
            h.update(text.as_bytes());
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixture plus the corruption its denoiser assumes under a config.
pub struct LoadedFixture {
    pub fixture: Fixture,
    pub text: String,
}

impl LoadedFixture {
    pub fn load(cfg: &ExperimentConfig) -> CliResult<Self> {
        let path = cfg
            .fixture
            .as_ref()
            .ok_or_else(|| CliError::Config("no fixture given (config key `fixture` or --fixture)".into()))?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("fixture {}: {e}", path.display())))?;
        let fixture = Fixture::from_json(&text).map_err(invalid)?;
        let model = fixture.data_model();
        let (len, k) = (model.seq_len(), model.vocab().size());
        if cfg.seq_len.is_some_and(|d| d != len) {
            return Err(CliError::Config(format!("config seq_len {:?} but fixture has {len}", cfg.seq_len)));
        }
        if cfg.vocab_size.is_some_and(|v| v != k) {
            return Err(CliError::Config(format!("config vocab_size {:?} but fixture has {k}", cfg.vocab_size)));
        }
        let labels = model.labels();
        for label in [cfg.source_label, cfg.target_label] {
            if !labels.contains(&label) {
                return Err(CliError::Config(format!("fixture has no condition with label {label}")));
            }
        }
        if let Some(src) = &cfg.source {
            if src.len() != len || src.iter().any(|&t| t >= k) {
                return Err(CliError::Config(format!("source {src:?} is not a length-{len} sequence over {k} tokens")));
            }
        }
        Ok(Self { fixture, text })
    }

    pub fn corruption(&self, cfg: &ExperimentConfig) -> CliResult<CorruptionModel> {
        Ok(match cfg.family {
            Family::Mgm => match cfg.noise {
                NoiseMode::MaskToken => CorruptionModel::MaskToken,
                NoiseMode::RandomToken => CorruptionModel::RandomToken {
                    schedule: cfg.mask_schedule(),
                    steps: cfg.steps,
                },
            },
            Family::Multinomial => {
                CorruptionModel::Multinomial(cfg.diffusion_schedule(self.fixture.data_model().vocab().size())?)
            }
        })
    }
}
