//! Evaluation: confusion matrices, PCC, average-FLOPs bookkeeping, SNR
//! estimation from power measurements, and fixed-SNR scenario suites.

use std::fmt::Write as _;
use std::time::Instant;

use crate::dataset::{generate_dataset, Dataset, DatasetSpec};
use crate::error::{NaelError, Result};
use crate::model::{arn_marginal_flops, base_flops, NaelModel};
use crate::waveform::ModulationScheme;

/// Square count grid over the recognized classes.
///
/// Rows index the predicted class, columns the actual (transmitted) class,
/// so each column sums to the number of test records of that class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn record(&mut self, predicted: usize, actual: usize) {
        assert!(predicted < self.num_classes && actual < self.num_classes);
        self.counts[predicted * self.num_classes + actual] += 1;
    }

    /// Count at (predicted row, actual column).
    pub fn get(&self, predicted: usize, actual: usize) -> u64 {
        self.counts[predicted * self.num_classes + actual]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    /// Per-actual-class record counts.
    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.num_classes)
            .map(|a| (0..self.num_classes).map(|p| self.get(p, a)).sum())
            .collect()
    }

    /// Probability of correct classification, in percent.
    pub fn pcc(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.trace() as f64 / total as f64 * 100.0
    }

    /// Fraction of each class's records classified correctly (NaN-free:
    /// classes absent from the test set report 0).
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        self.column_sums()
            .iter()
            .enumerate()
            .map(|(c, &n)| if n == 0 { 0.0 } else { self.get(c, c) as f64 / n as f64 })
            .collect()
    }

    /// 13x13 grid: header row and column carry the scheme names.
    pub fn to_csv(&self) -> String {
        let name = |i: usize| {
            ModulationScheme::from_class_index(i)
                .map(|s| s.name().to_string())
                .unwrap_or_else(|| format!("class{i}"))
        };
        let mut out = String::from("predicted\\actual");
        for a in 0..self.num_classes {
            let _ = write!(out, ",{}", name(a));
        }
        out.push('\n');
        for p in 0..self.num_classes {
            let _ = write!(out, "{}", name(p));
            for a in 0..self.num_classes {
                let _ = write!(out, ",{}", self.get(p, a));
            }
            out.push('\n');
        }
        out
    }
}

/// Aggregate metrics of one evaluation run.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    /// Fixed scenario SNR, when the test set was generated at one.
    pub snr_db: Option<f64>,
    /// Records evaluated.
    pub total: usize,
    /// Probability of correct classification, percent.
    pub pcc: f64,
    /// Mean multiply-accumulate cost per inference, in millions.
    pub mean_mflops: f64,
    /// Inferences routed through the ARN.
    pub arn_activations: u64,
    /// arn_activations / total, in [0, 1].
    pub arn_rate: f64,
    pub per_class_accuracy: Vec<f64>,
    pub runtime_seconds: f64,
}

impl ScenarioReport {
    /// Two-line CSV (header + values); per-class accuracies in percent.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("snr_db,total,pcc,mean_mflops,arn_activations,arn_rate");
        let mut row = format!(
            "{},{},{:.4},{:.6},{},{:.6}",
            self.snr_db.map_or_else(|| "mixed".to_string(), |s| format!("{s}")),
            self.total,
            self.pcc,
            self.mean_mflops,
            self.arn_activations,
            self.arn_rate,
        );
        for (i, acc) in self.per_class_accuracy.iter().enumerate() {
            let name = ModulationScheme::from_class_index(i)
                .map(|s| s.name().to_string())
                .unwrap_or_else(|| format!("class{i}"));
            let _ = write!(header, ",acc_{name}");
            let _ = write!(row, ",{:.4}", acc * 100.0);
        }
        format!("{header}\n{row}\n")
    }
}

/// Run adaptive inference over every record and aggregate.
///
/// The mean MFLOPs figure is the exact average of the per-inference
/// `flops_spent` counters, so it satisfies
/// `mean == base + rate * marginal` to machine precision.
pub fn evaluate(model: &mut NaelModel, dataset: &Dataset) -> Result<(ScenarioReport, ConfusionMatrix)> {
    let cfg = &model.config;
    if dataset.height != cfg.input_height || dataset.width != cfg.input_width {
        return Err(NaelError::Incompatible(format!(
            "dataset TFIs are {}x{} but the model expects {}x{}",
            dataset.height, dataset.width, cfg.input_height, cfg.input_width
        )));
    }
    if dataset.records.is_empty() {
        return Err(NaelError::Degenerate("cannot evaluate on an empty dataset".into()));
    }
    let num_classes = cfg.num_classes;
    for r in &dataset.records {
        if (r.class as usize) >= num_classes {
            return Err(NaelError::Incompatible(format!(
                "record class {} out of range for a {num_classes}-class model",
                r.class
            )));
        }
    }

    let start = Instant::now();
    let mut confusion = ConfusionMatrix::new(num_classes);
    let mut flops_sum: u64 = 0;
    let mut arn_activations: u64 = 0;
    for record in &dataset.records {
        let decision = model.nael_infer(&record.tfi)?;
        confusion.record(decision.predicted_class, record.class as usize);
        flops_sum += decision.flops_spent;
        arn_activations += u64::from(decision.used_arn);
    }
    let total = dataset.records.len();
    let snrs: Vec<f32> = dataset.records.iter().map(|r| r.snr_db).collect();
    let fixed_snr = if snrs.iter().all(|&s| s == snrs[0]) { Some(snrs[0] as f64) } else { None };
    let report = ScenarioReport {
        snr_db: fixed_snr,
        total,
        pcc: confusion.pcc(),
        mean_mflops: flops_sum as f64 / total as f64 / 1.0e6,
        arn_activations,
        arn_rate: arn_activations as f64 / total as f64,
        per_class_accuracy: confusion.per_class_accuracy(),
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, confusion))
}

/// SNR in dB from the power of a signal-plus-noise capture and a
/// noise-only capture: 10*log10((Py - Pn)/Pn).
pub fn estimate_snr(signal_plus_noise_power: f64, noise_power: f64) -> Result<f64> {
    if !(noise_power > 0.0) || !signal_plus_noise_power.is_finite() {
        return Err(NaelError::Parameter("powers must be positive and finite".into()));
    }
    if signal_plus_noise_power <= noise_power {
        return Err(NaelError::Degenerate(format!(
            "SNR undefined: combined power {signal_plus_noise_power} does not exceed noise power {noise_power}"
        )));
    }
    Ok(10.0 * ((signal_plus_noise_power - noise_power) / noise_power).log10())
}

/// Scenario SNRs mirroring the three evaluation environments.
pub const DEFAULT_SCENARIO_SNRS: [f64; 3] = [-4.0, -15.0, -17.0];
pub const DEFAULT_SCENARIO_PER_CLASS: usize = 100;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub snr_db: f64,
    pub report: ScenarioReport,
    pub confusion: ConfusionMatrix,
}

/// Generate a fresh fixed-SNR test set per entry of `snrs` (using
/// `template` for signal and TFI parameters) and evaluate each.
pub fn scenario_suite(
    model: &mut NaelModel,
    template: &DatasetSpec,
    snrs: &[f64],
    per_class: usize,
    seed: u64,
) -> Result<Vec<Scenario>> {
    let mut out = Vec::with_capacity(snrs.len());
    for (i, &snr) in snrs.iter().enumerate() {
        let spec = DatasetSpec {
            per_class,
            snr_range: (snr, snr),
            master_seed: seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1)),
            ..template.clone()
        };
        let dataset = generate_dataset(&spec)?;
        let (mut report, confusion) = evaluate(model, &dataset)?;
        report.snr_db = Some(snr);
        out.push(Scenario { snr_db: snr, report, confusion });
    }
    Ok(out)
}

/// One summary line per scenario: snr_db, pcc, mean_mflops, arn_rate.
pub fn scenario_summary_csv(scenarios: &[Scenario]) -> String {
    let mut out = String::from("snr_db,pcc,mean_mflops,arn_rate\n");
    for s in scenarios {
        let _ = writeln!(
            out,
            "{},{:.4},{:.6},{:.6}",
            s.snr_db, s.report.pcc, s.report.mean_mflops, s.report.arn_rate
        );
    }
    out
}

/// Exact identity the mean cost must satisfy; exposed for assertions.
pub fn expected_flops_sum(model: &NaelModel, total: u64, arn_activations: u64) -> u64 {
    total * base_flops(&model.config).total()
        + arn_activations * arn_marginal_flops(&model.config).total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeStageConfig, NanOverride, NetworkConfig};
    use crate::tfa::{CwdConfig, Tfi};
    use crate::waveform::NUM_SCHEMES;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> NetworkConfig {
        NetworkConfig {
            input_channels: 1,
            input_height: 32,
            input_width: 32,
            sc_channels: 8,
            prn_stages: vec![FeStageConfig { c_out: 16, alpha: 2, repeats: 2, stride: 2 }],
            prn_ce_channels: 32,
            arn_reuse_point: 1,
            arn_stages: vec![FeStageConfig { c_out: 24, alpha: 4, repeats: 2, stride: 2 }],
            arn_ce_channels: 64,
            nan_dims: [64, 16, 32, 2],
            num_classes: NUM_SCHEMES,
        }
    }

    fn toy_tfi(seed: u64) -> Tfi {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tfi {
            values: (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect(),
            height: 32,
            width: 32,
            fs: 10e6,
            normalized: false,
        };
        crate::tfa::normalize_tfi(&raw).unwrap()
    }

    fn toy_dataset(per_class: usize, seed: u64) -> Dataset {
        let mut records = Vec::new();
        for class in 0..NUM_SCHEMES {
            for i in 0..per_class {
                records.push(crate::dataset::Record {
                    class: class as u8,
                    snr_db: -5.0,
                    seed: seed ^ ((class * 1000 + i) as u64),
                    params: [0.0; 8],
                    tfi: toy_tfi(seed ^ ((class * 7919 + i) as u64)),
                });
            }
        }
        Dataset { height: 32, width: 32, records }
    }

    #[test]
    fn confusion_conservation_and_pcc() {
        let mut cm = ConfusionMatrix::new(12);
        // 3 per class, one misclassification: actual 0 predicted as 5.
        for c in 0..12 {
            cm.record(c, c);
            cm.record(c, c);
        }
        for c in 0..12 {
            if c == 0 {
                cm.record(5, 0);
            } else {
                cm.record(c, c);
            }
        }
        assert_eq!(cm.total(), 36);
        assert_eq!(cm.trace(), 35);
        assert_eq!(cm.column_sums(), vec![3; 12]);
        assert!((cm.pcc() - 35.0 / 36.0 * 100.0).abs() < 1e-12);
        let acc = cm.per_class_accuracy();
        assert!((acc[0] - 2.0 / 3.0).abs() < 1e-12);
        for &a in &acc[1..] {
            assert_eq!(a, 1.0);
        }
    }

    #[test]
    fn confusion_csv_layout() {
        let mut cm = ConfusionMatrix::new(12);
        cm.record(0, 0);
        cm.record(3, 7);
        let csv = cm.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 13);
        for line in &lines {
            assert_eq!(line.split(',').count(), 13);
        }
        assert!(lines[0].starts_with("predicted\\actual,LFM,Costas,"));
        // row 3 (P2... wait: names come from class order), column 7 entry is 1
        let row3: Vec<&str> = lines[4].split(',').collect();
        assert_eq!(row3[8], "1");
        let row0: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(row0[1], "1");
    }

    #[test]
    fn perfect_classifier_is_diagonal() {
        // Relabel a dataset with the model's own PRN predictions so every
        // record is "correct" by construction; force the reliable path.
        let cfg = toy_config();
        let mut model = NaelModel::new(&cfg, 11).unwrap();
        model.nan_override = Some(NanOverride::AlwaysReliable);
        let mut ds = toy_dataset(2, 99);
        for r in &mut ds.records {
            let d = model.nael_infer(&r.tfi).unwrap();
            r.class = d.predicted_class as u8;
        }
        let (report, cm) = evaluate(&mut model, &ds).unwrap();
        assert_eq!(report.pcc, 100.0);
        assert_eq!(cm.trace(), cm.total());
        for p in 0..12 {
            for a in 0..12 {
                if p != a {
                    assert_eq!(cm.get(p, a), 0);
                }
            }
        }
    }

    #[test]
    fn always_reliable_mean_is_base_cost() {
        let cfg = toy_config();
        let mut model = NaelModel::new(&cfg, 5).unwrap();
        model.nan_override = Some(NanOverride::AlwaysReliable);
        let ds = toy_dataset(1, 3);
        let (report, _) = evaluate(&mut model, &ds).unwrap();
        assert_eq!(report.arn_activations, 0);
        assert_eq!(report.arn_rate, 0.0);
        let base = base_flops(&cfg).total() as f64 / 1.0e6;
        assert_eq!(report.mean_mflops, base);
    }

    #[test]
    fn flops_identity_exact() {
        let cfg = toy_config();
        let mut model = NaelModel::new(&cfg, 17).unwrap();
        let ds = toy_dataset(3, 21);
        let (report, cm) = evaluate(&mut model, &ds).unwrap();
        assert_eq!(cm.total() as usize, ds.records.len());
        assert_eq!(cm.column_sums(), vec![3u64; 12]);
        let total = ds.records.len() as u64;
        let exact = expected_flops_sum(&model, total, report.arn_activations);
        let mean = exact as f64 / total as f64 / 1.0e6;
        assert_eq!(report.mean_mflops, mean);
        // identity in base/rate form, to machine precision
        let base = base_flops(&cfg).total() as f64 / 1.0e6;
        let marginal = arn_marginal_flops(&cfg).total() as f64 / 1.0e6;
        let identity = base + report.arn_rate * marginal;
        assert!((report.mean_mflops - identity).abs() <= 1e-9 * identity.max(1.0));
    }

    #[test]
    fn always_unreliable_rate_is_one() {
        let cfg = toy_config();
        let mut model = NaelModel::new(&cfg, 7).unwrap();
        model.nan_override = Some(NanOverride::AlwaysUnreliable);
        let ds = toy_dataset(1, 8);
        let (report, _) = evaluate(&mut model, &ds).unwrap();
        assert_eq!(report.arn_rate, 1.0);
        let full =
            (base_flops(&cfg).total() + arn_marginal_flops(&cfg).total()) as f64 / 1.0e6;
        assert_eq!(report.mean_mflops, full);
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let cfg = toy_config();
        let mut model = NaelModel::new(&cfg, 1).unwrap();
        let mut ds = toy_dataset(1, 1);
        ds.height = 16;
        ds.width = 16;
        assert!(matches!(evaluate(&mut model, &ds), Err(NaelError::Incompatible(_))));
    }

    #[test]
    fn estimate_snr_examples() {
        assert!((estimate_snr(2.0, 1.0).unwrap() - 0.0).abs() < 1e-12);
        assert!((estimate_snr(1.01, 1.0).unwrap() - (-20.0)).abs() < 1e-9);
        assert!(matches!(estimate_snr(1.0, 1.0), Err(NaelError::Degenerate(_))));
        assert!(matches!(estimate_snr(0.5, 1.0), Err(NaelError::Degenerate(_))));
        assert!(matches!(estimate_snr(1.0, 0.0), Err(NaelError::Parameter(_))));
    }

    #[test]
    fn scenario_suite_report_count_and_csv() {
        let cfg = toy_config();
        let mut model = NaelModel::new(&cfg, 2).unwrap();
        model.nan_override = Some(NanOverride::AlwaysReliable);
        let template = DatasetSpec {
            per_class: 2,
            fs: 10e6,
            signal_len: 256,
            snr_range: (0.0, 0.0),
            master_seed: 0,
            cwd: CwdConfig {
                sigma: 1.0,
                lag_window: 33,
                mu_window: 17,
                out_height: 32,
                out_width: 32,
            },
        };
        let snrs = [0.0, -10.0];
        let scenarios = scenario_suite(&mut model, &template, &snrs, 2, 42).unwrap();
        assert_eq!(scenarios.len(), snrs.len());
        for (s, &snr) in scenarios.iter().zip(&snrs) {
            assert_eq!(s.snr_db, snr);
            assert_eq!(s.report.snr_db, Some(snr));
            assert_eq!(s.report.total, 2 * NUM_SCHEMES);
            assert_eq!(s.confusion.column_sums(), vec![2u64; NUM_SCHEMES]);
            // every record was generated at exactly the scenario SNR
            assert_eq!(s.report.arn_rate, 0.0);
        }
        let csv = scenario_summary_csv(&scenarios);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 1 + snrs.len());
        assert_eq!(lines[0], "snr_db,pcc,mean_mflops,arn_rate");
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("-10,"));
    }

    #[test]
    fn scenario_suite_deterministic() {
        let cfg = toy_config();
        let template = DatasetSpec {
            per_class: 1,
            fs: 10e6,
            signal_len: 256,
            snr_range: (0.0, 0.0),
            master_seed: 0,
            cwd: CwdConfig {
                sigma: 1.0,
                lag_window: 33,
                mu_window: 17,
                out_height: 32,
                out_width: 32,
            },
        };
        let mut model_a = NaelModel::new(&cfg, 3).unwrap();
        let mut model_b = NaelModel::new(&cfg, 3).unwrap();
        let a = scenario_suite(&mut model_a, &template, &[-5.0], 1, 9).unwrap();
        let b = scenario_suite(&mut model_b, &template, &[-5.0], 1, 9).unwrap();
        assert_eq!(scenario_summary_csv(&a), scenario_summary_csv(&b));
        assert_eq!(a[0].confusion, b[0].confusion);
    }

    #[test]
    fn report_csv_layout() {
        let report = ScenarioReport {
            snr_db: Some(-4.0),
            total: 1200,
            pcc: 99.1,
            mean_mflops: 402.0,
            arn_activations: 20,
            arn_rate: 20.0 / 1200.0,
            per_class_accuracy: vec![1.0; 12],
            runtime_seconds: 0.0,
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 6 + 12);
        assert_eq!(lines[1].split(',').count(), 6 + 12);
        assert!(lines[1].starts_with("-4,1200,99.1000,402.000000,20,"));
    }
}
