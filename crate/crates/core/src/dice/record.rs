//! Little-endian binary encoding of [`InversionRecord`].
//!
//! ```text
//! magic         4 bytes   "DICE"
//! version       u16       1
//! family        u8        0 masked model, 1 multinomial
//! noise mode    u8        0 random token, 1 mask token, 255 for multinomial
//! vocab size    u32       K (data tokens)
//! seq len       u32       D
//! width         u32       residual columns: K, or K + 1 for multinomial
//! steps         u32       T
//! condition     i64       label, or -1 for unconditional
//! fingerprint   u64       schedule digest
//! floor         f64
//! seed count    u32       followed by (seed u64, stream u64, word pos u128) each
//! -- masked model only --
//! mask curve    u8
//! mask mode     u8        0 inclusive, 1 random
//! masks         (T + 1) * D bytes, 0 or 1, m_0 first
//! noise map     D * u32
//! clean logits  D * K f64
//! -- both --
//! trajectory    T * D u32, x_1 first
//! residuals     T * D * width f64, z_1 first
//! ```

use std::io::{Read, Write};

use super::{Family, InversionRecord};
use crate::denoise::Condition;
use crate::error::{DiceError, Result};
use crate::maskgen::{MaskPlan, NoiseMode};
use crate::rng::SeedProvenance;
use crate::schedules::{MaskCurve, MaskMode, MaskSchedule};
use crate::tokens::{LogitField, TokenSeq, Vocab};

pub const RECORD_MAGIC: [u8; 4] = *b"DICE";
pub const RECORD_VERSION: u16 = 1;

const NO_NOISE_MODE: u8 = 255;

fn io_err(e: std::io::Error) -> DiceError {
    DiceError::MalformedRecord(e.to_string())
}

pub fn write_record(record: &InversionRecord, out: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    let k = record.data_vocab.size();
    let len = record.seq_len();
    let width = record.residuals[0].cols();
    let steps = record.steps();
    buf.extend_from_slice(&RECORD_MAGIC);
    buf.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    buf.push(match record.family {
        Family::Mgm => 0,
        Family::Multinomial => 1,
    });
    buf.push(record.plan.as_ref().map_or(NO_NOISE_MODE, |p| p.mode().code()));
    for v in [k, len, width, steps] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&record.condition.to_code().to_le_bytes());
    buf.extend_from_slice(&record.schedule_fingerprint.to_le_bytes());
    buf.extend_from_slice(&record.residuals[0].floor().to_le_bytes());
    buf.extend_from_slice(&(record.seeds.len() as u32).to_le_bytes());
    for s in &record.seeds {
        buf.extend_from_slice(&s.seed.to_le_bytes());
        buf.extend_from_slice(&s.stream.to_le_bytes());
        buf.extend_from_slice(&s.word_pos.to_le_bytes());
    }
    if let (Some(plan), Some(y0)) = (&record.plan, &record.clean_logits) {
        let sched = plan.schedule();
        buf.push(sched.curve.code());
        buf.push(match sched.mode {
            MaskMode::Inclusive => 0,
            MaskMode::Random => 1,
        });
        for m in plan.masks() {
            buf.extend(m.iter().map(|&b| b as u8));
        }
        for &n in plan.noise().tokens() {
            buf.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in y0.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for x in &record.trajectory {
        for &tok in x.tokens() {
            buf.extend_from_slice(&(tok as u32).to_le_bytes());
        }
    }
    for z in &record.residuals {
        for v in z.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io_err)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            DiceError::MalformedRecord(format!("truncated at byte {}", self.pos))
        })?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn tokens(&mut self, n: usize, vocab: Vocab) -> Result<TokenSeq> {
        let tokens = (0..n).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        TokenSeq::new(tokens, vocab)
    }

    fn field(&mut self, rows: usize, cols: usize, floor: f64) -> Result<LogitField> {
        let values = (0..rows * cols).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        LogitField::new(rows, cols, values, floor)
    }
}

/// Sanity bound on header sizes so corrupt files fail fast instead of
/// allocating.
const MAX_ENTRIES: usize = 1 << 28;

pub fn read_record(input: &mut impl Read) -> Result<InversionRecord> {
    let mut data = Vec::new();
    input.read_to_end(&mut data).map_err(io_err)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.array::<4>()? != RECORD_MAGIC {
        return Err(DiceError::MalformedRecord("bad magic".into()));
    }
    let version = c.u16()?;
    if version != RECORD_VERSION {
        return Err(DiceError::MalformedRecord(format!("unsupported version {version}")));
    }
    let family = match c.u8()? {
        0 => Family::Mgm,
        1 => Family::Multinomial,
        other => return Err(DiceError::MalformedRecord(format!("unknown family {other}"))),
    };
    let noise_code = c.u8()?;
    let (k, len, width, steps) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    if len == 0 || steps == 0 || (steps + 1).saturating_mul(len).saturating_mul(width.max(1)) > MAX_ENTRIES {
        return Err(DiceError::MalformedRecord(format!("implausible sizes D={len}, T={steps}, width={width}")));
    }
    let condition = {
        let code = i64::from_le_bytes(c.array()?);
        Condition::from_code(code).ok_or_else(|| DiceError::MalformedRecord(format!("bad condition {code}")))?
    };
    let fingerprint = c.u64()?;
    let floor = c.f64()?;
    let seed_count = c.u32()?;
    if seed_count > MAX_ENTRIES {
        return Err(DiceError::MalformedRecord(format!("{seed_count} seeds")));
    }
    let mut seeds = Vec::with_capacity(seed_count);
    for _ in 0..seed_count {
        seeds.push(SeedProvenance {
            seed: c.u64()?,
            stream: c.u64()?,
            word_pos: u128::from_le_bytes(c.array()?),
        });
    }
    let data_vocab = Vocab::new(k, false)?;

    let (plan, clean_logits, state_vocab) = match family {
        Family::Mgm => {
            let mode = NoiseMode::from_code(noise_code)
                .ok_or_else(|| DiceError::MalformedRecord(format!("bad noise mode {noise_code}")))?;
            let curve_code = c.u8()?;
            let curve = MaskCurve::from_code(curve_code)
                .ok_or_else(|| DiceError::MalformedRecord(format!("bad mask curve {curve_code}")))?;
            let mask_mode = match c.u8()? {
                0 => MaskMode::Inclusive,
                1 => MaskMode::Random,
                other => return Err(DiceError::MalformedRecord(format!("bad mask mode {other}"))),
            };
            let mut masks = Vec::with_capacity(steps + 1);
            for _ in 0..=steps {
                let row = c.take(len)?;
                if row.iter().any(|&b| b > 1) {
                    return Err(DiceError::MalformedRecord("mask bytes must be 0 or 1".into()));
                }
                masks.push(row.iter().map(|&b| b == 1).collect());
            }
            let state_vocab = match mode {
                NoiseMode::MaskToken => data_vocab.with_mask(),
                NoiseMode::RandomToken => data_vocab,
            };
            let noise = c.tokens(len, state_vocab)?;
            let plan = MaskPlan::from_parts(MaskSchedule::new(curve, mask_mode), mode, masks, noise)?;
            let y0 = c.field(len, k, floor)?;
            (Some(plan), Some(y0), state_vocab)
        }
        Family::Multinomial => {
            if noise_code != NO_NOISE_MODE {
                return Err(DiceError::MalformedRecord("multinomial record with a noise mode".into()));
            }
            (None, None, data_vocab.with_mask())
        }
    };
    let trajectory = (0..steps)
        .map(|_| c.tokens(len, state_vocab))
        .collect::<Result<Vec<_>>>()?;
    let residuals = (0..steps)
        .map(|_| c.field(len, width, floor))
        .collect::<Result<Vec<_>>>()?;
    if c.pos != data.len() {
        return Err(DiceError::MalformedRecord(format!("{} trailing bytes", data.len() - c.pos)));
    }
    InversionRecord::new(
        family,
        condition,
        data_vocab,
        residuals,
        trajectory,
        clean_logits,
        plan,
        seeds,
        fingerprint,
    )
}
