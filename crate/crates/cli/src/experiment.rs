use std::path::Path;

use dice_core::denoise::{label_posterior, Condition, Denoiser};
use dice_core::dice::{
    edit_mgm, edit_multinomial, invert_mgm, invert_multinomial, read_record, sample_multinomial, sample_prior_state,
    write_record, EditParams, Family, InversionRecord,
};
use dice_core::maskgen::{generate_mask_plan, mgm_sample};
use dice_core::rng::{purpose, trial_stream};
use dice_core::schedules::DiffusionSchedule;
use dice_core::tokens::TokenSeq;
use dice_core::RngStream;

use crate::config::{ExperimentConfig, LoadedFixture};
use crate::error::{CliError, CliResult};

/// A validated config with its fixture, denoiser and (for multinomial runs)
/// diffusion schedule.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub fixture: LoadedFixture,
    pub denoiser: Box<dyn Denoiser>,
    pub schedule: Option<DiffusionSchedule>,
    pub config_hash: String,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> CliResult<Self> {
        cfg.validate()?;
        let fixture = LoadedFixture::load(&cfg)?;
        let corruption = fixture.corruption(&cfg)?;
        let schedule = match cfg.family {
            Family::Multinomial => Some(cfg.diffusion_schedule(fixture.fixture.data_model().vocab().size())?),
            Family::Mgm => None,
        };
        let denoiser = fixture.fixture.denoiser(corruption);
        let config_hash = cfg.hash(Some(&fixture.text));
        Ok(Self {
            cfg,
            fixture,
            denoiser,
            schedule,
            config_hash,
        })
    }

    fn stream(&self, trial: usize, purpose: u8) -> RngStream {
        RngStream::new(self.cfg.seed, trial_stream(trial as u64, purpose))
    }

    /// The configured source, or a draw from the source condition.
    pub fn source(&self, trial: usize) -> CliResult<TokenSeq> {
        let vocab = self.denoiser.data_vocab();
        match &self.cfg.source {
            Some(tokens) => Ok(TokenSeq::new(tokens.clone(), vocab)?),
            None => Ok(self
                .fixture
                .fixture
                .sample(self.cfg.source_label, &mut self.stream(trial, purpose::SOURCE))?),
        }
    }

    pub fn invert(&self, x0: &TokenSeq, trial: usize) -> CliResult<InversionRecord> {
        let cond = self.cfg.source_condition();
        let den = self.denoiser.as_ref();
        Ok(match &self.schedule {
            None => invert_mgm(x0, den, cond, &self.cfg.plan_params(), &mut self.stream(trial, purpose::PLAN))?,
            Some(sched) => invert_multinomial(x0, den, cond, sched, &mut self.stream(trial, purpose::TRAJECTORY))?,
        })
    }

    pub fn edit(&self, record: &InversionRecord, params: &EditParams, trial: usize) -> CliResult<TokenSeq> {
        let mut rng = self.stream(trial, purpose::EDIT);
        let den = self.denoiser.as_ref();
        Ok(match &self.schedule {
            None => edit_mgm(record, den, params, &mut rng)?,
            Some(sched) => edit_multinomial(record, den, sched, params, &mut rng)?,
        })
    }

    /// Plain ancestral sampling under the target condition, from the
    /// record's starting state when one is given.
    pub fn plain_sample(&self, record: Option<&InversionRecord>, trial: usize) -> CliResult<TokenSeq> {
        let cond = self.cfg.target_condition();
        let scale = self.cfg.cfg_scale;
        let den = self.denoiser.as_ref();
        let mut rng = self.stream(trial, purpose::SAMPLE);
        match (&self.schedule, record) {
            (None, Some(rec)) => {
                let plan = rec
                    .plan()
                    .ok_or_else(|| CliError::Io("masked-model record without a mask plan".into()))?;
                Ok(mgm_sample(den, plan, cond, scale, &mut rng)?)
            }
            (None, None) => {
                let len = self.fixture.fixture.data_model().seq_len();
                let p = self.cfg.plan_params();
                let mut plan_rng = self.stream(trial, purpose::PLAN);
                let plan = generate_mask_plan(p.schedule, p.noise, den.data_vocab(), len, p.steps, &mut plan_rng)?;
                Ok(mgm_sample(den, &plan, cond, scale, &mut rng)?)
            }
            (Some(sched), Some(rec)) => {
                let t = rec.steps();
                Ok(sample_multinomial(den, sched, cond, scale, rec.state(t), t, &mut rng)?)
            }
            (Some(sched), None) => {
                let len = self.fixture.fixture.data_model().seq_len();
                let start = sample_prior_state(sched, len, &mut rng)?;
                Ok(sample_multinomial(den, sched, cond, scale, &start, sched.steps(), &mut rng)?)
            }
        }
    }

    /// Rejects records made under a different family, vocabulary or
    /// schedule than this experiment.
    pub fn check_record(&self, record: &InversionRecord) -> CliResult<()> {
        if record.family() != self.cfg.family {
            return Err(CliError::Config(format!(
                "record family is {} but the config says {}",
                record.family().name(),
                self.cfg.family.name()
            )));
        }
        let model = self.fixture.fixture.data_model();
        if record.data_vocab() != self.denoiser.data_vocab() || record.seq_len() != model.seq_len() {
            return Err(CliError::Config(format!(
                "record has D={} K={}, fixture has D={} K={}",
                record.seq_len(),
                record.data_vocab().size(),
                model.seq_len(),
                model.vocab().size()
            )));
        }
        if let Some(sched) = &self.schedule {
            if sched.fingerprint() != record.schedule_fingerprint() {
                return Err(CliError::Config(format!(
                    "record schedule {:016x} differs from the configured schedule {:016x}",
                    record.schedule_fingerprint(),
                    sched.fingerprint()
                )));
            }
        }
        Ok(())
    }

    /// Whether the exact classifier prefers the target over the source label.
    pub fn prefers_target(&self, x: &TokenSeq) -> CliResult<bool> {
        let post = label_posterior(self.fixture.fixture.data_model(), x.tokens())?;
        let p = |l: u32| post.iter().find(|(k, _)| *k == l).map_or(0.0, |(_, p)| *p);
        Ok(p(self.cfg.target_label) > p(self.cfg.source_label))
    }

    pub fn render(&self, x: &TokenSeq) -> String {
        self.fixture.fixture.render(x)
    }

    pub fn condition_name(&self, cond: Condition) -> String {
        match cond {
            Condition::Label(l) => self
                .fixture
                .fixture
                .condition_names
                .get(&l)
                .cloned()
                .unwrap_or_else(|| l.to_string()),
            Condition::Unconditional => "unconditional".into(),
        }
    }
}

pub fn load_record(path: &Path) -> CliResult<(InversionRecord, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("record {}", path.display()), e))?;
    let record =
        read_record(&mut bytes.as_slice()).map_err(|e| CliError::io(format!("record {}", path.display()), e))?;
    Ok((record, bytes))
}

pub fn record_bytes(record: &InversionRecord) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_record(record, &mut buf)?;
    Ok(buf)
}
