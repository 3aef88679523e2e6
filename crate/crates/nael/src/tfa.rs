//! Discrete Choi-Williams distribution (CWD) and fixed-size normalized
//! time-frequency images.
//!
//! Discretization: for each time index `t` the local autocorrelation
//! `K[t, tau] = sum_mu g(mu, tau) * y[t+mu+tau] * conj(y[t+mu-tau])` is
//! formed with the exponential kernel `g(mu, tau) = exp(-sigma*mu^2/(4*tau^2))`
//! truncated to the mu window and normalized to unit sum per lag (`tau = 0`
//! degenerates to a delta at `mu = 0`). The magnitude of the DFT over `tau`
//! (length `2*(lag_window-1)`) gives the frequency axis. Because the lag
//! samples are spaced two signal samples apart, a tone at frequency `f`
//! lands on DFT bin `2*f/fs * nfft (mod nfft)`; rows are fftshifted so that
//! `fs/2` sits at the center row, matching the center-frequency alignment
//! applied upstream. Both axes are then decimated to the output size by bin
//! averaging.

use num_complex::Complex64;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::io::Write;

use crate::error::{NaelError, Result};
use crate::waveform::IqSignal;

/// CWD discretization parameters.
#[derive(Debug, Clone)]
pub struct CwdConfig {
    /// Kernel scaling factor sigma (> 0): larger suppresses cross-terms less.
    pub sigma: f64,
    /// Odd length of the lag (tau) window in samples.
    pub lag_window: usize,
    /// Odd length of the mu window in samples.
    pub mu_window: usize,
    /// Frequency bins of the output TFI (power of two, >= 8).
    pub out_height: usize,
    /// Time bins of the output TFI (power of two, >= 8).
    pub out_width: usize,
}

impl Default for CwdConfig {
    fn default() -> Self {
        CwdConfig {
            sigma: 1.0,
            lag_window: 129,
            mu_window: 65,
            out_height: 128,
            out_width: 128,
        }
    }
}

impl CwdConfig {
    /// DFT length over the lag axis.
    pub fn nfft(&self) -> usize {
        2 * (self.lag_window - 1)
    }

    pub(crate) fn validate(&self, signal_len: usize) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(NaelError::Parameter("CWD sigma must be > 0".into()));
        }
        for (name, w) in [("lag_window", self.lag_window), ("mu_window", self.mu_window)] {
            if w < 3 || w % 2 == 0 {
                return Err(NaelError::Parameter(format!("{name} must be odd and >= 3, got {w}")));
            }
        }
        for (name, d) in [("out_height", self.out_height), ("out_width", self.out_width)] {
            if d < 8 || !d.is_power_of_two() {
                return Err(NaelError::Parameter(format!(
                    "{name} must be a power of two >= 8, got {d}"
                )));
            }
        }
        if signal_len < self.lag_window {
            return Err(NaelError::Size(format!(
                "signal length {signal_len} shorter than lag window {}",
                self.lag_window
            )));
        }
        if self.nfft() % self.out_height != 0 {
            return Err(NaelError::Parameter(format!(
                "out_height {} must divide nfft {}",
                self.out_height,
                self.nfft()
            )));
        }
        if signal_len % self.out_width != 0 {
            return Err(NaelError::Parameter(format!(
                "out_width {} must divide signal length {signal_len}",
                self.out_width
            )));
        }
        Ok(())
    }
}

/// Real-valued time-frequency image; rows index frequency, columns time.
#[derive(Debug, Clone, PartialEq)]
pub struct Tfi {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub fs: f64,
    pub normalized: bool,
}

impl Tfi {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64
    }

    /// Column index of the largest value in the given column.
    pub fn column_argmax(&self, col: usize) -> usize {
        (0..self.height)
            .max_by(|&a, &b| self.get(a, col).partial_cmp(&self.get(b, col)).unwrap())
            .unwrap()
    }
}

/// The output row a pure tone at `f` maps to under this discretization.
pub fn tone_row(f: f64, fs: f64, config: &CwdConfig) -> usize {
    let nfft = config.nfft() as f64;
    let bin = (2.0 * f / fs * nfft).round() as i64;
    let shifted = (bin + config.nfft() as i64 / 2).rem_euclid(config.nfft() as i64) as usize;
    shifted / (config.nfft() / config.out_height)
}

fn mu_weights(config: &CwdConfig, tau: i64) -> Vec<f64> {
    let hm = (config.mu_window as i64 - 1) / 2;
    if tau == 0 {
        let mut w = vec![0.0; config.mu_window];
        w[hm as usize] = 1.0;
        return w;
    }
    let mut w: Vec<f64> = (-hm..=hm)
        .map(|mu| (-config.sigma * (mu * mu) as f64 / (4.0 * (tau * tau) as f64)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Compute the CWD of a signal and decimate to the configured output size.
pub fn cwd(signal: &IqSignal, config: &CwdConfig) -> Result<Tfi> {
    let n = signal.len();
    config.validate(n)?;
    let half = (config.lag_window as i64 - 1) / 2;
    let hm = (config.mu_window as i64 - 1) / 2;
    let nfft = config.nfft();
    let y = &signal.samples;

    // K[t][tau_idx], built lag by lag: the mu sum is a 1-D smoothing of the
    // instantaneous product z_tau[m] = y[m+tau] * conj(y[m-tau]) along m.
    let k_rows: Vec<Vec<Complex64>> = (-half..=half)
        .into_par_iter()
        .map(|tau| {
            let w = mu_weights(config, tau);
            let z: Vec<Complex64> = (0..n as i64)
                .map(|m| {
                    let a = m + tau;
                    let b = m - tau;
                    if a < 0 || a >= n as i64 || b < 0 || b >= n as i64 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        y[a as usize] * y[b as usize].conj()
                    }
                })
                .collect();
            (0..n as i64)
                .map(|t| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for (wi, mu) in (-hm..=hm).enumerate() {
                        let m = t + mu;
                        if m >= 0 && m < n as i64 {
                            acc += w[wi] * z[m as usize];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();

    let mut planner = rustfft::FftPlanner::new();
    let fft = planner.plan_fft_forward(nfft);

    // raw_shifted[t][row], rows fftshifted so bin 0 maps to row nfft/2
    let raw: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
            for (tau_idx, tau) in (-half..=half).enumerate() {
                let slot = tau.rem_euclid(nfft as i64) as usize;
                buf[slot] = k_rows[tau_idx][t];
            }
            fft.process(&mut buf);
            (0..nfft)
                .map(|row| buf[(row + nfft / 2) % nfft].norm())
                .collect()
        })
        .collect();

    Ok(decimate(&raw, n, nfft, config, signal.fs))
}

fn decimate(raw: &[Vec<f64>], n: usize, nfft: usize, config: &CwdConfig, fs: f64) -> Tfi {
    let t_group = n / config.out_width;
    let f_group = nfft / config.out_height;
    let mut values = vec![0.0; config.out_height * config.out_width];
    for r in 0..config.out_height {
        for c in 0..config.out_width {
            let mut acc = 0.0;
            for dt in 0..t_group {
                for df in 0..f_group {
                    acc += raw[c * t_group + dt][r * f_group + df];
                }
            }
            values[r * config.out_width + c] = acc / (t_group * f_group) as f64;
        }
    }
    Tfi {
        values,
        height: config.out_height,
        width: config.out_width,
        fs,
        normalized: false,
    }
}

/// Literal nested-loop evaluation of the same discretization; testing oracle
/// only, restricted to signals of at most 64 samples.
pub fn cwd_reference(signal: &IqSignal, config: &CwdConfig) -> Result<Tfi> {
    let n = signal.len();
    if n > 64 {
        return Err(NaelError::Size(format!(
            "cwd_reference accepts at most 64 samples, got {n}"
        )));
    }
    config.validate(n)?;
    let half = (config.lag_window as i64 - 1) / 2;
    let hm = (config.mu_window as i64 - 1) / 2;
    let nfft = config.nfft();
    let y = &signal.samples;
    let sample = |i: i64| -> Complex64 {
        if i < 0 || i >= n as i64 {
            Complex64::new(0.0, 0.0)
        } else {
            y[i as usize]
        }
    };

    let mut raw = vec![vec![0.0f64; nfft]; n];
    for t in 0..n as i64 {
        // K[t][tau] by direct summation
        let mut k = vec![Complex64::new(0.0, 0.0); config.lag_window];
        for (tau_idx, tau) in (-half..=half).enumerate() {
            if tau == 0 {
                k[tau_idx] = sample(t) * sample(t).conj();
            } else {
                let mut norm = 0.0;
                for mu in -hm..=hm {
                    norm += (-config.sigma * (mu * mu) as f64 / (4.0 * (tau * tau) as f64)).exp();
                }
                let mut acc = Complex64::new(0.0, 0.0);
                for mu in -hm..=hm {
                    let g = (-config.sigma * (mu * mu) as f64 / (4.0 * (tau * tau) as f64)).exp() / norm;
                    acc += g * sample(t + mu + tau) * sample(t + mu - tau).conj();
                }
                k[tau_idx] = acc;
            }
        }
        // direct DFT over tau, then fftshift
        for row in 0..nfft {
            let bin = (row + nfft / 2) % nfft;
            let mut acc = Complex64::new(0.0, 0.0);
            for (tau_idx, tau) in (-half..=half).enumerate() {
                let angle = -2.0 * PI * bin as f64 * tau as f64 / nfft as f64;
                acc += k[tau_idx] * Complex64::from_polar(1.0, angle);
            }
            raw[t as usize][row] = acc.norm();
        }
    }
    Ok(decimate(&raw, n, nfft, config, signal.fs))
}

/// Normalize a TFI to zero mean and unit variance over all entries.
pub fn normalize_tfi(tfi: &Tfi) -> Result<Tfi> {
    let var = tfi.variance();
    if var <= f64::EPSILON {
        return Err(NaelError::Degenerate("TFI has (near-)zero variance".into()));
    }
    let mean = tfi.mean();
    let std = var.sqrt();
    Ok(Tfi {
        values: tfi.values.iter().map(|v| (v - mean) / std).collect(),
        height: tfi.height,
        width: tfi.width,
        fs: tfi.fs,
        normalized: true,
    })
}

/// Debug dump as an 8-bit binary portable graymap, min-max scaled.
pub fn write_pgm<W: Write>(tfi: &Tfi, out: &mut W) -> std::io::Result<()> {
    let lo = tfi.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = tfi.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    write!(out, "P5\n{} {}\n255\n", tfi.width, tfi.height)?;
    let bytes: Vec<u8> = tfi
        .values
        .iter()
        .map(|v| ((v - lo) / span * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::{synthesize, ModulationScheme, WaveformParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> CwdConfig {
        CwdConfig {
            sigma: 1.0,
            lag_window: 9,
            mu_window: 5,
            out_height: 8,
            out_width: 8,
        }
    }

    fn random_signal(n: usize, seed: u64) -> IqSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IqSignal {
            samples: (0..n)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
            fs: 1.0,
        }
    }

    #[test]
    fn zero_signal_gives_zero_tfi() {
        let sig = IqSignal { samples: vec![Complex64::new(0.0, 0.0); 16], fs: 1.0 };
        let out = cwd(&sig, &toy_config()).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
        let r = cwd_reference(&sig, &toy_config()).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cwd_matches_reference_on_small_signals() {
        let config = toy_config();
        for seed in 0..10 {
            let sig = random_signal(16, seed);
            let fast = cwd(&sig, &config).unwrap();
            let slow = cwd_reference(&sig, &config).unwrap();
            for (a, b) in fast.values.iter().zip(slow.values.iter()) {
                assert!((a - b).abs() < 1e-9, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn reference_rejects_long_signals() {
        let sig = random_signal(128, 0);
        assert!(matches!(cwd_reference(&sig, &toy_config()), Err(NaelError::Size(_))));
    }

    #[test]
    fn cwd_rejects_short_signal() {
        let sig = random_signal(8, 0);
        assert!(matches!(cwd(&sig, &toy_config()), Err(NaelError::Size(_))));
    }

    #[test]
    fn tone_at_center_localizes_to_center_row() {
        let fs = 10e6;
        let n = 128;
        let config = CwdConfig {
            sigma: 1.0,
            lag_window: 33,
            mu_window: 17,
            out_height: 16,
            out_width: 16,
        };
        let params = WaveformParams { f_c: fs / 2.0 - 0.001, bandwidth: 0.0, ..Default::default() };
        let sig = synthesize(ModulationScheme::Lfm, &params, n, fs).unwrap();
        // effectively a tone at fs/2, which tone_row maps to the center
        let expect = config.out_height / 2;
        assert_eq!(tone_row(fs / 2.0, fs, &config), expect);
        let tfi = cwd(&sig, &config).unwrap();
        for col in 1..tfi.width - 1 {
            assert_eq!(tfi.column_argmax(col), expect, "column {col}");
        }
    }

    #[test]
    fn energy_scales_quadratically() {
        let config = toy_config();
        let sig = random_signal(16, 3);
        let scaled = IqSignal {
            samples: sig.samples.iter().map(|s| s * 2.5).collect(),
            fs: sig.fs,
        };
        let base = cwd(&sig, &config).unwrap();
        let big = cwd(&scaled, &config).unwrap();
        for (a, b) in base.values.iter().zip(big.values.iter()) {
            let expect = a * 2.5 * 2.5;
            assert!((b - expect).abs() <= 1e-9 * expect.abs().max(1.0), "{b} vs {expect}");
        }
    }

    #[test]
    fn normalize_contract() {
        let sig = random_signal(16, 5);
        let tfi = cwd(&sig, &toy_config()).unwrap();
        let norm = normalize_tfi(&tfi).unwrap();
        assert!(norm.normalized);
        assert!(norm.mean().abs() < 1e-6);
        assert!((norm.variance() - 1.0).abs() < 1e-4);
        // idempotence within tolerance
        let again = normalize_tfi(&norm).unwrap();
        let max_diff = norm
            .values
            .iter()
            .zip(again.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-5);
    }

    #[test]
    fn normalize_rejects_constant_image() {
        let tfi = Tfi {
            values: vec![3.0; 64],
            height: 8,
            width: 8,
            fs: 1.0,
            normalized: false,
        };
        assert!(matches!(normalize_tfi(&tfi), Err(NaelError::Degenerate(_))));
    }

    #[test]
    fn pgm_header() {
        let sig = random_signal(16, 9);
        let tfi = cwd(&sig, &toy_config()).unwrap();
        let mut buf = Vec::new();
        write_pgm(&tfi, &mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(buf.len(), "P5\n8 8\n255\n".len() + 64);
    }
}
