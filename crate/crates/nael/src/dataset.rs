//! Labeled TFI dataset generation, persistence, and stratified splitting.
//!
//! Each record is produced by the synthesize -> add noise -> center-shift
//! -> CWD -> normalize pipeline from a per-record seed derived
//! deterministically from the master seed, so dataset bytes are a pure
//! function of the spec.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{NaelError, Result};
use crate::tfa::{cwd, normalize_tfi, CwdConfig, Tfi};
use crate::waveform::{
    add_awgn, center_shift, nominal_center, synthesize, ModulationScheme, WaveformParams,
    NUM_SCHEMES,
};

pub const MAGIC: &[u8; 8] = b"NAELDS1\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    /// Records generated per modulation scheme.
    pub per_class: usize,
    /// Sampling rate in Hz.
    pub fs: f64,
    /// Samples per synthesized signal.
    pub signal_len: usize,
    /// SNR drawn uniformly from this closed-open interval, dB.
    pub snr_range: (f64, f64),
    pub master_seed: u64,
    pub cwd: CwdConfig,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            per_class: 500,
            fs: 10e6,
            signal_len: 1024,
            snr_range: (-15.0, 5.0),
            master_seed: 0,
            cwd: CwdConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(NaelError::Parameter("per_class must be > 0".into()));
        }
        if !(self.fs > 0.0) {
            return Err(NaelError::Parameter("fs must be positive".into()));
        }
        if self.snr_range.0 > self.snr_range.1 {
            return Err(NaelError::Parameter(format!(
                "snr range low {} > high {}",
                self.snr_range.0, self.snr_range.1
            )));
        }
        self.cwd.validate(self.signal_len)?;
        Ok(())
    }
}

/// One labeled sample.
///
/// `params` is a fixed 8-slot block:
/// - 0: carrier f_c (Costas: fundamental f_min), Hz
/// - 1: LFM bandwidth B | Costas spacing f_hop | T3/T4 bandwidth ΔF, Hz
/// - 2: first discrete parameter (Costas L_hs, Barker L_B, poly-phase
///   N_sc, T1/T2 segment count k)
/// - 3: second discrete parameter (Barker N_sc, Frank/P1/P2 M, P3/P4 N_c)
/// - 4: initial phase, rad
/// - 5: amplitude
/// - 6, 7: reserved (zero)
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub class: u8,
    pub snr_db: f32,
    pub seed: u64,
    pub params: [f32; 8],
    pub tfi: Tfi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn per_class_counts(&self) -> [usize; NUM_SCHEMES] {
        let mut counts = [0usize; NUM_SCHEMES];
        for r in &self.records {
            counts[r.class as usize] += 1;
        }
        counts
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-record seed from (master seed, scheme, index).
pub fn derive_seed(master: u64, class: usize, index: usize) -> u64 {
    mix64(master ^ mix64(((class as u64) << 40) ^ index as u64))
}

/// Draw one parameter set and SNR per Table IV of the design: fs-relative
/// uniform intervals for continuous parameters, uniform choice over the
/// listed sets for discrete ones. The draw order is fixed (SNR first).
pub fn sample_params(
    scheme: ModulationScheme,
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> (WaveformParams, f64) {
    use ModulationScheme::*;
    let fs = spec.fs;
    // a degenerate range pins the SNR (used for fixed-SNR scenario sets)
    let snr_db = if spec.snr_range.0 < spec.snr_range.1 {
        rng.gen_range(spec.snr_range.0..spec.snr_range.1)
    } else {
        spec.snr_range.0
    };
    let mut p = WaveformParams { phi0: rng.gen_range(0.0..std::f64::consts::TAU), ..Default::default() };
    let pick = |rng: &mut ChaCha8Rng, set: &[usize]| set[rng.gen_range(0..set.len())];
    match scheme {
        Lfm => {
            p.f_c = rng.gen_range(fs / 8.0..fs / 4.0);
            p.bandwidth = rng.gen_range(fs / 20.0..fs / 8.0);
        }
        Costas => {
            p.f_min = rng.gen_range(fs / 40.0..fs / 10.0);
            p.hop_count = pick(rng, &[4, 6]);
            p.f_hop = rng.gen_range(fs / 40.0..3.0 * fs / 40.0);
        }
        Barker => {
            p.f_c = rng.gen_range(fs / 8.0..fs / 4.0);
            p.barker_len = pick(rng, &[7, 11, 13]);
            p.samples_per_subcode = pick(rng, &[20, 24, 28, 32]);
        }
        Frank | P1 => {
            p.f_c = rng.gen_range(fs / 8.0..fs / 4.0);
            p.samples_per_subcode = pick(rng, &[5, 6, 7]);
            p.poly_order = pick(rng, &[6, 7, 8]);
        }
        P2 => {
            p.f_c = rng.gen_range(fs / 8.0..fs / 4.0);
            p.samples_per_subcode = pick(rng, &[5, 6, 7]);
            p.poly_order = pick(rng, &[6, 8]);
        }
        P3 | P4 => {
            p.f_c = rng.gen_range(fs / 8.0..fs / 4.0);
            p.samples_per_subcode = pick(rng, &[5, 6, 7]);
            p.code_len = pick(rng, &[36, 49, 64]);
        }
        T1 | T2 => {
            p.f_c = rng.gen_range(fs / 8.0..fs / 4.0);
            p.seg_count = pick(rng, &[5, 6, 7]);
        }
        T3 | T4 => {
            p.f_c = rng.gen_range(fs / 8.0..fs / 4.0);
            p.delta_f = rng.gen_range(fs / 20.0..fs / 10.0);
        }
    }
    (p, snr_db)
}

fn pack_params(scheme: ModulationScheme, p: &WaveformParams) -> [f32; 8] {
    use ModulationScheme::*;
    let mut out = [0.0f32; 8];
    out[0] = if scheme == Costas { p.f_min } else { p.f_c } as f32;
    out[1] = match scheme {
        Lfm => p.bandwidth,
        Costas => p.f_hop,
        T3 | T4 => p.delta_f,
        _ => 0.0,
    } as f32;
    out[2] = match scheme {
        Costas => p.hop_count as f64,
        Barker => p.barker_len as f64,
        Frank | P1 | P2 | P3 | P4 => p.samples_per_subcode as f64,
        T1 | T2 => p.seg_count as f64,
        _ => 0.0,
    } as f32;
    out[3] = match scheme {
        Barker => p.samples_per_subcode as f64,
        Frank | P1 | P2 => p.poly_order as f64,
        P3 | P4 => p.code_len as f64,
        _ => 0.0,
    } as f32;
    out[4] = p.phi0 as f32;
    out[5] = p.amplitude as f32;
    out
}

/// Generate a single record from its derived seed.
pub fn generate_record(spec: &DatasetSpec, scheme: ModulationScheme, seed: u64) -> Result<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (params, snr_db) = sample_params(scheme, spec, &mut rng);
    let noise_seed: u64 = rng.gen();
    let clean = synthesize(scheme, &params, spec.signal_len, spec.fs)?;
    let noisy = add_awgn(&clean, snr_db, noise_seed);
    let shifted = center_shift(&noisy, nominal_center(scheme, &params));
    let tfi = cwd(&shifted, &spec.cwd)?;
    let tfi = normalize_tfi(&tfi)?;
    Ok(Record {
        class: scheme.class_index() as u8,
        snr_db: snr_db as f32,
        seed,
        params: pack_params(scheme, &params),
        tfi,
    })
}

/// Generate the full dataset: `per_class` records per scheme, generated in
/// parallel from independent derived seeds, then shuffled deterministically.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let jobs: Vec<(ModulationScheme, u64)> = ModulationScheme::ALL
        .iter()
        .flat_map(|&scheme| {
            (0..spec.per_class)
                .map(move |i| (scheme, derive_seed(spec.master_seed, scheme.class_index(), i)))
        })
        .collect();
    let mut records = jobs
        .par_iter()
        .map(|&(scheme, seed)| generate_record(spec, scheme, seed))
        .collect::<Result<Vec<Record>>>()?;
    // deterministic Fisher-Yates, independent of library shuffle internals
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.master_seed ^ 0x5351_4855_4646_4C45));
    for i in (1..records.len()).rev() {
        records.swap(i, rng.gen_range(0..=i));
    }
    Ok(Dataset { height: spec.cwd.out_height, width: spec.cwd.out_width, records })
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

impl Dataset {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.records.len())
            .map_err(|_| NaelError::Size("too many records".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for r in &self.records {
            if r.tfi.height != self.height || r.tfi.width != self.width {
                return Err(NaelError::Shape(format!(
                    "record TFI {}x{} in a {}x{} dataset",
                    r.tfi.height, r.tfi.width, self.height, self.width
                )));
            }
            out.push(r.class);
            out.extend_from_slice(&r.snr_db.to_le_bytes());
            out.extend_from_slice(&r.seed.to_le_bytes());
            for &v in &r.params {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &v in &r.tfi.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8, "magic")? != MAGIC {
            return Err(NaelError::Format { offset: 0, msg: "bad magic, expected NAELDS1".into() });
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(NaelError::Format {
                offset: 8,
                msg: format!("unsupported dataset version {version}"),
            });
        }
        let count = cur.u32("record count")? as usize;
        let height = cur.u32("height")? as usize;
        let width = cur.u32("width")? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let class_off = cur.pos;
            let class = cur.take(1, "class")?[0];
            if class as usize >= NUM_SCHEMES {
                return Err(NaelError::Format {
                    offset: class_off as u64,
                    msg: format!("class index {class} out of range"),
                });
            }
            let snr_db = f32::from_le_bytes(cur.take(4, "snr")?.try_into().unwrap());
            let seed = u64::from_le_bytes(cur.take(8, "seed")?.try_into().unwrap());
            let mut params = [0.0f32; 8];
            for slot in params.iter_mut() {
                *slot = f32::from_le_bytes(cur.take(4, "param block")?.try_into().unwrap());
            }
            let raw = cur.take(height * width * 4, "tfi data")?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            records.push(Record {
                class,
                snr_db,
                seed,
                params,
                // sample rate is not part of the on-disk format; the TFI
                // grid is all the consumers need
                tfi: Tfi { values, height, width, fs: 0.0, normalized: true },
            });
        }
        if cur.pos != bytes.len() {
            return Err(NaelError::Format {
                offset: cur.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        Ok(Dataset { height, width, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Dataset::from_bytes(&bytes)
    }

    /// Stratified split: per class, shuffle reproducibly and partition by
    /// the fractions (all but the last floor; the last takes the rest).
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
        if fractions.is_empty() {
            return Err(NaelError::Parameter("need at least one fraction".into()));
        }
        if fractions.iter().any(|&f| f < 0.0) {
            return Err(NaelError::Parameter("fractions must be nonnegative".into()));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NaelError::Parameter(format!("fractions sum to {sum}, expected 1")));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_SCHEMES];
        for (i, r) in self.records.iter().enumerate() {
            by_class[r.class as usize].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x54_49_4C_50_53));
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
        for indices in by_class.iter_mut() {
            for i in (1..indices.len()).rev() {
                indices.swap(i, rng.gen_range(0..=i));
            }
            let n = indices.len();
            let mut start = 0;
            for (j, &f) in fractions.iter().enumerate() {
                let take = if j + 1 == fractions.len() {
                    n - start
                } else {
                    ((f * n as f64).floor() as usize).min(n - start)
                };
                parts[j].extend_from_slice(&indices[start..start + take]);
                start += take;
            }
        }
        Ok(parts
            .into_iter()
            .map(|mut idx| {
                idx.sort_unstable();
                Dataset {
                    height: self.height,
                    width: self.width,
                    records: idx.iter().map(|&i| self.records[i].clone()).collect(),
                }
            })
            .collect())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(NaelError::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
