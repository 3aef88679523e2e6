//! Synthesis of the 12 LPI radar modulation schemes, the AWGN channel, and
//! the center-frequency alignment shift.
//!
//! Every operation here is pure given an explicit seed, so concurrent use is
//! safe with no shared state.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;

use crate::error::{NaelError, Result};

pub const NUM_SCHEMES: usize = 12;

/// The 12 recognized modulation schemes: two frequency modulations (LFM,
/// Costas) and ten phase modulations (Barker-coded BPSK, polyphase Frank and
/// P1-P4, polytime T1-T4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModulationScheme {
    Lfm,
    Costas,
    Barker,
    Frank,
    P1,
    P2,
    P3,
    P4,
    T1,
    T2,
    T3,
    T4,
}

impl ModulationScheme {
    pub const ALL: [ModulationScheme; NUM_SCHEMES] = [
        ModulationScheme::Lfm,
        ModulationScheme::Costas,
        ModulationScheme::Barker,
        ModulationScheme::Frank,
        ModulationScheme::P1,
        ModulationScheme::P2,
        ModulationScheme::P3,
        ModulationScheme::P4,
        ModulationScheme::T1,
        ModulationScheme::T2,
        ModulationScheme::T3,
        ModulationScheme::T4,
    ];

    pub fn class_index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn from_class_index(idx: usize) -> Option<ModulationScheme> {
        Self::ALL.get(idx).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModulationScheme::Lfm => "LFM",
            ModulationScheme::Costas => "Costas",
            ModulationScheme::Barker => "Barker",
            ModulationScheme::Frank => "Frank",
            ModulationScheme::P1 => "P1",
            ModulationScheme::P2 => "P2",
            ModulationScheme::P3 => "P3",
            ModulationScheme::P4 => "P4",
            ModulationScheme::T1 => "T1",
            ModulationScheme::T2 => "T2",
            ModulationScheme::T3 => "T3",
            ModulationScheme::T4 => "T4",
        }
    }

    /// Frequency-modulated schemes (phase held at `phi0`).
    pub fn is_fm(self) -> bool {
        matches!(self, ModulationScheme::Lfm | ModulationScheme::Costas)
    }

    /// Phase-coded schemes with one phase value per subcode.
    pub fn is_phase_coded(self) -> bool {
        matches!(
            self,
            ModulationScheme::Barker
                | ModulationScheme::Frank
                | ModulationScheme::P1
                | ModulationScheme::P2
                | ModulationScheme::P3
                | ModulationScheme::P4
        )
    }

    pub fn is_polytime(self) -> bool {
        matches!(
            self,
            ModulationScheme::T1 | ModulationScheme::T2 | ModulationScheme::T3 | ModulationScheme::T4
        )
    }
}

/// Synthesis parameters. Only the fields relevant to a scheme are consumed.
#[derive(Debug, Clone)]
pub struct WaveformParams {
    /// Amplitude (linear).
    pub amplitude: f64,
    /// Initial phase (rad).
    pub phi0: f64,
    /// Center frequency (Hz); the carrier for PM schemes, sweep start for LFM.
    pub f_c: f64,
    /// LFM sweep bandwidth (Hz).
    pub bandwidth: f64,
    /// Costas fundamental frequency (Hz).
    pub f_min: f64,
    /// Costas hop-sequence length.
    pub hop_count: usize,
    /// Costas frequency spacing (Hz).
    pub f_hop: f64,
    /// Barker code length.
    pub barker_len: usize,
    /// Samples per subcode (per carrier-frequency cycle).
    pub samples_per_subcode: usize,
    /// Polyphase order M (Frank, P1, P2).
    pub poly_order: usize,
    /// Polyphase code length N_c (P3, P4).
    pub code_len: usize,
    /// Number of polytime segments (T1, T2).
    pub seg_count: usize,
    /// Polytime modulation bandwidth ΔF (Hz) (T3, T4).
    pub delta_f: f64,
    /// Polytime phase-state count.
    pub n_states: usize,
}

impl Default for WaveformParams {
    fn default() -> Self {
        WaveformParams {
            amplitude: 1.0,
            phi0: 0.0,
            f_c: 0.0,
            bandwidth: 0.0,
            f_min: 0.0,
            hop_count: 4,
            f_hop: 0.0,
            barker_len: 13,
            samples_per_subcode: 20,
            poly_order: 8,
            code_len: 64,
            seg_count: 5,
            delta_f: 0.0,
            n_states: 2,
        }
    }
}

/// Complex baseband sample sequence with its sampling rate.
#[derive(Debug, Clone)]
pub struct IqSignal {
    pub samples: Vec<Complex64>,
    pub fs: f64,
}

impl IqSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean |y[n]|^2.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }
}

/// Welch-construction Costas hop permutations. Each passes the
/// distinct-differences test (see the unit tests for the brute-force check).
pub fn costas_sequence(l: usize) -> Result<Vec<usize>> {
    match l {
        4 => Ok(vec![2, 4, 3, 1]),
        6 => Ok(vec![3, 2, 6, 4, 5, 1]),
        _ => Err(NaelError::Parameter(format!(
            "unsupported Costas hop count {l}; expected 4 or 6"
        ))),
    }
}

/// Barker chip sequences for the supported lengths.
pub fn barker_sequence(l: usize) -> Result<Vec<i8>> {
    match l {
        7 => Ok(vec![1, 1, 1, -1, -1, 1, -1]),
        11 => Ok(vec![1, 1, 1, -1, -1, -1, 1, -1, -1, 1, -1]),
        13 => Ok(vec![1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1]),
        _ => Err(NaelError::Parameter(format!(
            "unsupported Barker length {l}; expected 7, 11, or 13"
        ))),
    }
}

fn reduce_phase(phi: f64) -> f64 {
    // into (-2pi, 2pi)
    phi % (2.0 * PI)
}

/// Per-subcode phase sequence for the phase-coded schemes.
///
/// Frank/P1/P2 produce `M*M` phases, P3/P4 produce `N_c`, Barker produces
/// `L_B` (0 for +1 chips, pi for -1 chips).
pub fn phase_code(scheme: ModulationScheme, params: &WaveformParams) -> Result<Vec<f64>> {
    if !scheme.is_phase_coded() {
        return Err(NaelError::WrongScheme(format!(
            "{} has no per-subcode phase code",
            scheme.name()
        )));
    }
    let phases = match scheme {
        ModulationScheme::Barker => barker_sequence(params.barker_len)?
            .iter()
            .map(|&chip| if chip > 0 { 0.0 } else { PI })
            .collect(),
        ModulationScheme::Frank => {
            let m = check_poly_order(params.poly_order)?;
            let mut v = Vec::with_capacity(m * m);
            for j in 1..=m {
                for i in 1..=m {
                    v.push(reduce_phase(2.0 * PI * ((i - 1) * (j - 1)) as f64 / m as f64));
                }
            }
            v
        }
        ModulationScheme::P1 => {
            let m = check_poly_order(params.poly_order)?;
            let mut v = Vec::with_capacity(m * m);
            for j in 1..=m {
                for i in 1..=m {
                    let a = (m as f64) - (2 * j - 1) as f64;
                    let b = ((j - 1) * m + (i - 1)) as f64;
                    v.push(reduce_phase(-(PI / m as f64) * a * b));
                }
            }
            v
        }
        ModulationScheme::P2 => {
            let m = check_poly_order(params.poly_order)?;
            let mut v = Vec::with_capacity(m * m);
            for j in 1..=m {
                for i in 1..=m {
                    let a = (2 * i) as f64 - 1.0 - m as f64;
                    let b = (2 * j) as f64 - 1.0 - m as f64;
                    v.push(reduce_phase(-(PI / (2.0 * m as f64)) * a * b));
                }
            }
            v
        }
        ModulationScheme::P3 => {
            let n_c = check_code_len(params.code_len)?;
            (1..=n_c)
                .map(|i| reduce_phase(PI * ((i - 1) * (i - 1)) as f64 / n_c as f64))
                .collect()
        }
        ModulationScheme::P4 => {
            let n_c = check_code_len(params.code_len)?;
            (1..=n_c)
                .map(|i| {
                    reduce_phase(PI * ((i - 1) * (i - 1)) as f64 / n_c as f64 - PI * (i - 1) as f64)
                })
                .collect()
        }
        _ => unreachable!(),
    };
    Ok(phases)
}

fn check_poly_order(m: usize) -> Result<usize> {
    if m < 2 {
        return Err(NaelError::Parameter(format!("polyphase order M={m}; need M >= 2")));
    }
    Ok(m)
}

fn check_code_len(n_c: usize) -> Result<usize> {
    if n_c < 1 {
        return Err(NaelError::Parameter("polyphase code length N_c must be >= 1".into()));
    }
    Ok(n_c)
}

fn wrap_two_pi(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let r = x % two_pi;
    if r < 0.0 {
        r + two_pi
    } else {
        r
    }
}

/// Polytime phase at time `t` within a pulse of duration `pulse_dur`.
///
/// The phase is quantized to `n_states` levels and is piecewise constant
/// in `t`; returned values lie in `[0, 2*pi)`.
pub fn polytime_phase(
    scheme: ModulationScheme,
    params: &WaveformParams,
    t: f64,
    pulse_dur: f64,
) -> Result<f64> {
    if !scheme.is_polytime() {
        return Err(NaelError::WrongScheme(format!(
            "{} is not a polytime scheme",
            scheme.name()
        )));
    }
    if !(0.0..1.0).contains(&(t / pulse_dur)) {
        return Err(NaelError::Parameter(format!(
            "time {t} outside pulse [0, {pulse_dur})"
        )));
    }
    let n = params.n_states as f64;
    if params.n_states < 2 {
        return Err(NaelError::Parameter("polytime n_states must be >= 2".into()));
    }
    let step = 2.0 * PI / n;
    let phi = match scheme {
        ModulationScheme::T1 | ModulationScheme::T2 => {
            let k = params.seg_count as f64;
            if params.seg_count < 1 {
                return Err(NaelError::Parameter("polytime seg_count must be >= 1".into()));
            }
            // segment index for t in [j*T/k, (j+1)*T/k)
            let j = ((k * t / pulse_dur).floor() as usize).min(params.seg_count - 1) as f64;
            let local = k * t - j * pulse_dur;
            let arg = if scheme == ModulationScheme::T1 {
                local * j * n / pulse_dur
            } else {
                local * (2.0 * j - k + 1.0) * (n / 2.0) / pulse_dur
            };
            step * arg.floor()
        }
        ModulationScheme::T3 => step * (n * params.delta_f * t * t / (2.0 * pulse_dur)).floor(),
        ModulationScheme::T4 => {
            step * (n * params.delta_f * t * t / (2.0 * pulse_dur) - n * params.delta_f * t / 2.0).floor()
        }
        _ => unreachable!(),
    };
    Ok(wrap_two_pi(phi))
}

fn validate_common(params: &WaveformParams, n: usize, fs: f64) -> Result<()> {
    if n == 0 {
        return Err(NaelError::Parameter("sample count must be > 0".into()));
    }
    if params.amplitude <= 0.0 {
        return Err(NaelError::Parameter("amplitude must be > 0".into()));
    }
    if fs <= 0.0 {
        return Err(NaelError::Parameter("sampling rate must be > 0".into()));
    }
    Ok(())
}

/// Synthesize a noiseless waveform of `n` samples at rate `fs`.
///
/// FM schemes keep the phase at `phi0` and modulate frequency (accumulated
/// by phase integration to avoid discontinuities); PM schemes keep the
/// carrier at `f_c` and step the phase per subcode of `samples_per_subcode`
/// samples, tiling the natural code period cyclically to fill `n`.
pub fn synthesize(
    scheme: ModulationScheme,
    params: &WaveformParams,
    n: usize,
    fs: f64,
) -> Result<IqSignal> {
    validate_common(params, n, fs)?;
    let a = params.amplitude;
    let samples = match scheme {
        ModulationScheme::Lfm => {
            if params.f_c <= 0.0 || params.f_c >= fs / 2.0 {
                return Err(NaelError::Parameter(format!(
                    "LFM f_c {} outside (0, fs/2)",
                    params.f_c
                )));
            }
            if params.bandwidth < 0.0 {
                return Err(NaelError::Parameter("LFM bandwidth must be >= 0".into()));
            }
            let mut phase = params.phi0;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push(Complex64::from_polar(a, phase));
                let f_inst = params.f_c + params.bandwidth * i as f64 / n as f64;
                phase += 2.0 * PI * f_inst / fs;
            }
            out
        }
        ModulationScheme::Costas => {
            let seq = costas_sequence(params.hop_count)?;
            if params.f_min <= 0.0 || params.f_hop < 0.0 {
                return Err(NaelError::Parameter("Costas f_min must be > 0, f_hop >= 0".into()));
            }
            let per_hop = (n / seq.len()).max(1);
            let mut phase = params.phi0;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push(Complex64::from_polar(a, phase));
                let hop = (i / per_hop) % seq.len();
                let f = params.f_min + (seq[hop] - 1) as f64 * params.f_hop;
                phase += 2.0 * PI * f / fs;
            }
            out
        }
        s if s.is_phase_coded() => {
            if params.f_c <= 0.0 || params.f_c >= fs / 2.0 {
                return Err(NaelError::Parameter(format!(
                    "carrier f_c {} outside (0, fs/2)",
                    params.f_c
                )));
            }
            if params.samples_per_subcode == 0 {
                return Err(NaelError::Parameter("samples_per_subcode must be > 0".into()));
            }
            let code = phase_code(s, params)?;
            (0..n)
                .map(|i| {
                    let sub = (i / params.samples_per_subcode) % code.len();
                    let phi = 2.0 * PI * params.f_c * i as f64 / fs + code[sub] + params.phi0;
                    Complex64::from_polar(a, phi)
                })
                .collect()
        }
        s => {
            // polytime
            if params.f_c <= 0.0 || params.f_c >= fs / 2.0 {
                return Err(NaelError::Parameter(format!(
                    "carrier f_c {} outside (0, fs/2)",
                    params.f_c
                )));
            }
            let pulse_dur = n as f64 / fs;
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let t = i as f64 / fs;
                let code_phi = polytime_phase(s, params, t, pulse_dur)?;
                let phi = 2.0 * PI * params.f_c * i as f64 / fs + code_phi + params.phi0;
                out.push(Complex64::from_polar(a, phi));
            }
            out
        }
    };
    Ok(IqSignal { samples, fs })
}

/// Add circular complex white Gaussian noise at the requested SNR.
///
/// Per-sample noise variance is `A^2 / 10^(snr_db/10)` with `A^2` taken as
/// the signal's mean power. `snr_db = +inf` returns the input unchanged.
pub fn add_awgn(signal: &IqSignal, snr_db: f64, rng_seed: u64) -> IqSignal {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return signal.clone();
    }
    let sig_power = signal.power();
    let noise_var = sig_power / 10f64.powf(snr_db / 10.0);
    let per_component = (noise_var / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let samples = signal
        .samples
        .iter()
        .map(|&s| {
            let re: f64 = normal.sample(&mut rng);
            let im: f64 = normal.sample(&mut rng);
            s + Complex64::new(re * per_component, im * per_component)
        })
        .collect();
    IqSignal { samples, fs: signal.fs }
}

/// Shift a signal whose nominal center is `f_c` so its occupied band is
/// centered at `fs/2`, the middle of the full-band TFI frequency axis.
pub fn center_shift(signal: &IqSignal, f_c: f64) -> IqSignal {
    let offset = signal.fs / 2.0 - f_c;
    let w = 2.0 * PI * offset / signal.fs;
    let samples = signal
        .samples
        .iter()
        .enumerate()
        .map(|(i, &s)| s * Complex64::from_polar(1.0, w * i as f64))
        .collect();
    IqSignal { samples, fs: signal.fs }
}

/// The frequency a scheme's occupied band is centered on, used as the `f_c`
/// argument of [`center_shift`].
pub fn nominal_center(scheme: ModulationScheme, params: &WaveformParams) -> f64 {
    match scheme {
        ModulationScheme::Lfm => params.f_c + params.bandwidth / 2.0,
        ModulationScheme::Costas => {
            let seq = costas_sequence(params.hop_count).unwrap_or_else(|_| vec![1]);
            let mean_idx = seq.iter().map(|&c| (c - 1) as f64).sum::<f64>() / seq.len() as f64;
            params.f_min + mean_idx * params.f_hop
        }
        _ => params.f_c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force Costas check: all within-row entries of the difference
    /// triangle must be distinct.
    fn is_costas(seq: &[usize]) -> bool {
        let l = seq.len();
        for row in 1..l {
            let diffs: Vec<i64> = (0..l - row)
                .map(|i| seq[i + row] as i64 - seq[i] as i64)
                .collect();
            for a in 0..diffs.len() {
                for b in a + 1..diffs.len() {
                    if diffs[a] == diffs[b] {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Aperiodic autocorrelation of a chip sequence.
    fn autocorr(seq: &[i8]) -> Vec<i64> {
        let l = seq.len();
        (0..l)
            .map(|lag| {
                (0..l - lag)
                    .map(|i| seq[i] as i64 * seq[i + lag] as i64)
                    .sum()
            })
            .collect()
    }

    #[test]
    fn costas_sequences_pass_distinct_differences() {
        assert_eq!(costas_sequence(4).unwrap(), vec![2, 4, 3, 1]);
        assert!(is_costas(&costas_sequence(4).unwrap()));
        assert_eq!(costas_sequence(6).unwrap(), vec![3, 2, 6, 4, 5, 1]);
        assert!(is_costas(&costas_sequence(6).unwrap()));
        assert!(matches!(costas_sequence(5), Err(NaelError::Parameter(_))));
    }

    #[test]
    fn barker_autocorrelation_sidelobes() {
        for l in [7usize, 11, 13] {
            let seq = barker_sequence(l).unwrap();
            let ac = autocorr(&seq);
            assert_eq!(ac[0], l as i64);
            for &s in &ac[1..] {
                assert!(s.abs() <= 1, "sidelobe {s} for L={l}");
            }
        }
        assert!(matches!(barker_sequence(5), Err(NaelError::Parameter(_))));
    }

    #[test]
    fn frank_m2_phases() {
        let params = WaveformParams { poly_order: 2, ..Default::default() };
        let code = phase_code(ModulationScheme::Frank, &params).unwrap();
        let expected = [0.0, 0.0, 0.0, PI];
        assert_eq!(code.len(), 4);
        for (c, e) in code.iter().zip(expected.iter()) {
            assert!((c - e).abs() < 1e-12, "{c} vs {e}");
        }
    }

    #[test]
    fn p4_nc4_phases() {
        let params = WaveformParams { code_len: 4, ..Default::default() };
        let code = phase_code(ModulationScheme::P4, &params).unwrap();
        let expected = [0.0, -3.0 * PI / 4.0, -PI, -3.0 * PI / 4.0];
        assert_eq!(code.len(), 4);
        for (c, e) in code.iter().zip(expected.iter()) {
            assert!((c - e).abs() < 1e-12, "{c} vs {e}");
        }
    }

    #[test]
    fn barker7_phase_mapping() {
        let params = WaveformParams { barker_len: 7, ..Default::default() };
        let code = phase_code(ModulationScheme::Barker, &params).unwrap();
        let expected = [0.0, 0.0, 0.0, PI, PI, 0.0, PI];
        for (c, e) in code.iter().zip(expected.iter()) {
            assert!((c - e).abs() < 1e-12);
        }
    }

    #[test]
    fn phase_code_rejects_fm_and_polytime() {
        let params = WaveformParams::default();
        assert!(matches!(
            phase_code(ModulationScheme::Lfm, &params),
            Err(NaelError::WrongScheme(_))
        ));
        assert!(matches!(
            phase_code(ModulationScheme::T1, &params),
            Err(NaelError::WrongScheme(_))
        ));
    }

    #[test]
    fn polytime_zero_time_is_zero_phase() {
        let params = WaveformParams { seg_count: 5, delta_f: 1e5, ..Default::default() };
        for s in [ModulationScheme::T1, ModulationScheme::T3] {
            assert_eq!(polytime_phase(s, &params, 0.0, 1e-3).unwrap(), 0.0);
        }
        assert!(matches!(
            polytime_phase(ModulationScheme::Lfm, &params, 0.0, 1e-3),
            Err(NaelError::WrongScheme(_))
        ));
    }

    #[test]
    fn t1_binary_states() {
        // dense sampling over [0, T): exactly the 2 states {0, pi}
        let params = WaveformParams { seg_count: 5, n_states: 2, ..Default::default() };
        let t_total = 1.0;
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..10_000 {
            let t = i as f64 / 10_000.0 * t_total;
            let phi = polytime_phase(ModulationScheme::T1, &params, t, t_total).unwrap();
            seen.insert((phi / PI * 1e9).round() as i64);
        }
        let expected: std::collections::BTreeSet<i64> = [0i64, 1_000_000_000].into_iter().collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn lfm_zero_bandwidth_is_pure_tone() {
        let params = WaveformParams { f_c: 1e6, bandwidth: 0.0, ..Default::default() };
        let sig = synthesize(ModulationScheme::Lfm, &params, 256, 10e6).unwrap();
        let expected_inc = 2.0 * PI * 1e6 / 10e6;
        for w in sig.samples.windows(2) {
            let inc = (w[1] / w[0]).arg();
            assert!((inc - expected_inc).abs() < 1e-12);
        }
    }

    fn default_params_for(fs: f64) -> WaveformParams {
        WaveformParams {
            f_c: fs / 6.0,
            bandwidth: fs / 10.0,
            f_min: fs / 30.0,
            f_hop: fs / 25.0,
            delta_f: fs / 15.0,
            ..Default::default()
        }
    }

    #[test]
    fn constant_modulus_all_schemes() {
        let fs = 10e6;
        for scheme in ModulationScheme::ALL {
            let params = default_params_for(fs);
            let sig = synthesize(scheme, &params, 1024, fs).unwrap();
            for s in &sig.samples {
                assert!((s.norm() - 1.0).abs() < 1e-12, "{}", scheme.name());
            }
        }
    }

    #[test]
    fn barker_demodulated_phase_states() {
        let fs = 10e6;
        let params = WaveformParams {
            f_c: fs / 5.0,
            barker_len: 7,
            samples_per_subcode: 20,
            ..Default::default()
        };
        let sig = synthesize(ModulationScheme::Barker, &params, 140, fs).unwrap();
        // demodulate: remove the carrier, quantize remaining phase
        let mut prev_state = None;
        for (i, s) in sig.samples.iter().enumerate() {
            let carrier = Complex64::from_polar(1.0, 2.0 * PI * params.f_c * i as f64 / fs);
            let residual = (s / carrier).arg();
            let state = if residual.abs() < 1e-9 {
                0
            } else {
                assert!((residual.abs() - PI).abs() < 1e-9, "residual {residual}");
                1
            };
            if let Some(p) = prev_state {
                if p != state {
                    assert_eq!(i % 20, 0, "phase change off subcode boundary at {i}");
                }
            }
            prev_state = Some(state);
        }
    }

    #[test]
    fn awgn_infinite_snr_is_identity() {
        let params = WaveformParams { f_c: 1e6, ..Default::default() };
        let sig = synthesize(ModulationScheme::Lfm, &params, 64, 10e6).unwrap();
        let out = add_awgn(&sig, f64::INFINITY, 1);
        for (a, b) in sig.samples.iter().zip(out.samples.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn awgn_variance_at_zero_db() {
        let params = WaveformParams { f_c: 1e6, ..Default::default() };
        let sig = synthesize(ModulationScheme::Lfm, &params, 1_000_000, 10e6).unwrap();
        let noisy = add_awgn(&sig, 0.0, 42);
        let var: f64 = sig
            .samples
            .iter()
            .zip(noisy.samples.iter())
            .map(|(a, b)| (b - a).norm_sqr())
            .sum::<f64>()
            / sig.len() as f64;
        assert!((0.99..=1.01).contains(&var), "empirical noise variance {var}");
    }

    #[test]
    fn awgn_deterministic_under_seed() {
        let params = WaveformParams { f_c: 1e6, ..Default::default() };
        let sig = synthesize(ModulationScheme::Lfm, &params, 128, 10e6).unwrap();
        let a = add_awgn(&sig, 5.0, 7);
        let b = add_awgn(&sig, 5.0, 7);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn center_shift_moves_tone_to_middle_bin() {
        let fs = 10e6;
        let n = 1024;
        let f_c = fs / 8.0;
        let params = WaveformParams { f_c, bandwidth: 0.0, ..Default::default() };
        let sig = synthesize(ModulationScheme::Lfm, &params, n, fs).unwrap();
        let shifted = center_shift(&sig, f_c);
        // FFT-peak oracle
        let mut planner = rustfft::FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex64> = shifted.samples.clone();
        fft.process(&mut buf);
        let peak = buf
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, n / 2);
        // modulus preserved exactly
        for (a, b) in sig.samples.iter().zip(shifted.samples.iter()) {
            assert!((a.norm() - b.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn center_shift_at_half_fs_is_identity() {
        let fs = 10e6;
        let params = WaveformParams { f_c: fs / 2.0 - 1.0, ..Default::default() };
        let sig = synthesize(ModulationScheme::Lfm, &params, 64, fs).unwrap();
        let out = center_shift(&sig, fs / 2.0);
        for (a, b) in sig.samples.iter().zip(out.samples.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
