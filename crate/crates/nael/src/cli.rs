//! Helpers shared by the `nael` binary: exit-code policy, fs-relative
//! frequency parsing, checkpoint-directory conventions, and raw IQ input.

use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::error::{NaelError, Result};
use crate::model::{NaelModel, NetworkConfig};
use crate::nn::checkpoint::Checkpoint;

/// Process exit code for a failed command: 2 usage, 3 data/format,
/// 4 dependency, 5 numeric failure.
pub fn exit_code(err: &NaelError) -> i32 {
    match err {
        NaelError::Parameter(_) | NaelError::Contract(_) => 2,
        NaelError::Format { .. }
        | NaelError::Io(_)
        | NaelError::Shape(_)
        | NaelError::Size(_)
        | NaelError::Label(_)
        | NaelError::WrongScheme(_)
        | NaelError::Incompatible(_) => 3,
        NaelError::Dependency(_) | NaelError::State(_) => 4,
        NaelError::Training { .. } | NaelError::Degenerate(_) => 5,
    }
}

/// Parse a frequency flag that may be given in hertz ("1.25e6") or
/// relative to the sampling rate ("fs/8", "fs"); the relative forms are
/// evaluated exactly.
pub fn parse_freq(text: &str, fs: f64) -> Result<f64> {
    let t = text.trim();
    if t == "fs" {
        return Ok(fs);
    }
    if let Some(div) = t.strip_prefix("fs/") {
        let d: f64 = div
            .trim()
            .parse()
            .map_err(|_| NaelError::Parameter(format!("bad frequency divisor in '{text}'")))?;
        if !(d > 0.0) {
            return Err(NaelError::Parameter(format!("divisor must be positive in '{text}'")));
        }
        return Ok(fs / d);
    }
    t.parse::<f64>()
        .map_err(|_| NaelError::Parameter(format!("cannot parse frequency '{text}'")))
}

/// Master seed from the NAEL_SEED environment variable, defaulting to 0.
pub fn env_seed() -> Result<u64> {
    match std::env::var("NAEL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| NaelError::Parameter(format!("NAEL_SEED is not a valid u64: '{v}'"))),
        Err(_) => Ok(0),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prn,
    Nan,
    Arn,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prn => "prn",
            Stage::Nan => "nan",
            Stage::Arn => "arn",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Stage::Prn => "prn.ck",
            Stage::Nan => "nan.ck",
            Stage::Arn => "arn.ck",
        }
    }
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(stage.file_name())
}

/// Load a stage checkpoint, failing with a dependency error naming the
/// missing stage if the file is absent.
pub fn require_checkpoint(dir: &Path, stage: Stage) -> Result<Checkpoint> {
    let path = checkpoint_path(dir, stage);
    if !path.exists() {
        return Err(NaelError::Dependency(format!(
            "missing {} checkpoint at {} — run `nael train {}` first",
            stage.name(),
            path.display(),
            stage.name()
        )));
    }
    Checkpoint::load(&path)
}

/// Fresh model with the listed stages restored from `dir`.
pub fn load_model(
    config: &NetworkConfig,
    seed: u64,
    dir: &Path,
    stages: &[Stage],
) -> Result<NaelModel> {
    let mut model = NaelModel::new(config, seed)?;
    for &stage in stages {
        let ck = require_checkpoint(dir, stage)?;
        match stage {
            Stage::Prn => model.prn.load_checkpoint(&ck)?,
            Stage::Nan => model.nan.load_checkpoint(&ck)?,
            Stage::Arn => model.arn.load_checkpoint(&ck)?,
        }
    }
    Ok(model)
}

/// Read interleaved little-endian f32 I/Q pairs.
pub fn read_iq_f32(path: &Path, fs: f64) -> Result<crate::waveform::IqSignal> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(NaelError::Format {
            offset: bytes.len() as u64,
            msg: "IQ file length is not a multiple of 8 bytes (f32 I/Q pairs)".into(),
        });
    }
    let mut samples = Vec::with_capacity(bytes.len() / 8);
    for pair in bytes.chunks_exact(8) {
        let re = f32::from_le_bytes(pair[0..4].try_into().unwrap()) as f64;
        let im = f32::from_le_bytes(pair[4..8].try_into().unwrap()) as f64;
        if !re.is_finite() || !im.is_finite() {
            return Err(NaelError::Format {
                offset: (samples.len() * 8) as u64,
                msg: "non-finite IQ sample".into(),
            });
        }
        samples.push(Complex64::new(re, im));
    }
    if samples.is_empty() {
        return Err(NaelError::Format { offset: 0, msg: "empty IQ file".into() });
    }
    Ok(crate::waveform::IqSignal { samples, fs })
}
