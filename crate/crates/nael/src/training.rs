//! Staged training protocol: PRN first, then NAN on PRN-correctness
//! labels, then ARN on top of the frozen PRN stem. Each routine mutates
//! exactly one network; the others are only ever run in inference mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Record};
use crate::error::{NaelError, Result};
use crate::model::{argmax, gradient_map, importance_weights, Arn, Nan, Prn};
use crate::nn::layers::softmax_xent_batch;
use crate::nn::optim::AdamState;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seed for the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 32, lr: 1e-3, seed: 0 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(NaelError::Parameter("epochs must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(NaelError::Parameter(
                "batch size must be >= 2 (batch normalization)".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(NaelError::Parameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Cumulative weight updates at the end of this epoch.
    pub updates: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.loss)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.accuracy)
    }

    /// CSV rows: epoch, split, loss, accuracy, updates.
    pub fn to_csv(&self, split: &str) -> String {
        let mut out = String::from("epoch,split,loss,accuracy,updates\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                e.epoch, split, e.loss, e.accuracy, e.updates
            ));
        }
        out
    }
}

/// Epoch batch plan: shuffled index batches; batches of one sample are
/// dropped (batch normalization needs at least two).
fn plan_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        indices.swap(i, rng.gen_range(0..=i));
    }
    indices
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn batch_input(records: &[Record], batch: &[usize], h: usize, w: usize) -> (Tensor, Vec<usize>) {
    let mut data = Vec::with_capacity(batch.len() * h * w);
    let mut labels = Vec::with_capacity(batch.len());
    for &i in batch {
        data.extend_from_slice(&records[i].tfi.values);
        labels.push(records[i].class as usize);
    }
    (
        Tensor { shape: vec![batch.len(), 1, h, w], data },
        labels,
    )
}

fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape[1];
    labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(&logits.data[i * k..(i + 1) * k]) == l)
        .count()
}

/// Train the PRN with Adam on 12-class cross-entropy.
pub fn train_prn(prn: &mut Prn, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(NaelError::Degenerate("empty training dataset".into()));
    }
    let (h, w) = (dataset.height, dataset.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(cfg.lr);
    let mut history = TrainHistory::default();
    let mut updates = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in plan_batches(dataset.records.len(), cfg.batch_size, &mut rng) {
            let (input, labels) = batch_input(&dataset.records, &batch, h, w);
            let out = prn.forward_batch(&input, true)?;
            let (loss, _, dlogits) = softmax_xent_batch(&out.logits, &labels, None)?;
            if !loss.is_finite() {
                return Err(NaelError::Training {
                    step: updates + 1,
                    msg: "non-finite PRN loss".into(),
                });
            }
            correct += batch_accuracy(&out.logits, &labels);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            prn.zero_grads();
            prn.backward(&dlogits)?;
            opt.begin_step();
            for (name, p) in prn.named_params() {
                opt.update(&name, p)?;
            }
            updates += 1;
        }
        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            updates,
        });
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// NAN labeling and training
// ---------------------------------------------------------------------------

/// One gradient map with its reliability label (0 = reliable: the PRN was
/// right on the underlying record; 1 = unreliable).
#[derive(Debug, Clone, PartialEq)]
pub struct MapRecord {
    pub map: Vec<f64>,
    pub label: usize,
    pub class: u8,
    pub snr_db: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapDataset {
    pub records: Vec<MapRecord>,
}

impl MapDataset {
    /// (reliable, unreliable) counts.
    pub fn label_balance(&self) -> (usize, usize) {
        let unreliable = self.records.iter().filter(|r| r.label == 1).count();
        (self.records.len() - unreliable, unreliable)
    }
}

/// Run the frozen PRN over the dataset, producing one gradient map per
/// record labeled by whether the PRN classified the record correctly.
pub fn label_nan_dataset(prn: &mut Prn, dataset: &Dataset) -> Result<MapDataset> {
    let mut records = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        let fwd = prn.forward_tfi(&r.tfi)?;
        let pred = argmax(&fwd.probs);
        let (fh, fw) = (fwd.feature_map.shape[1], fwd.feature_map.shape[2]);
        let weights = importance_weights(&prn.fc.weight.value, fh, fw, pred)?;
        let map = gradient_map(&fwd.feature_map, &weights, pred)?;
        records.push(MapRecord {
            map: map.values,
            label: usize::from(pred != r.class as usize),
            class: r.class,
            snr_db: r.snr_db,
        });
    }
    Ok(MapDataset { records })
}

/// Train the NAN on labeled gradient maps with inverse-frequency class
/// weights. The networks that produced the maps are not involved.
pub fn train_nan(nan: &mut Nan, maps: &MapDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    let (reliable, unreliable) = maps.label_balance();
    if reliable == 0 || unreliable == 0 {
        return Err(NaelError::Degenerate(format!(
            "NAN training needs both labels; got {reliable} reliable / {unreliable} unreliable"
        )));
    }
    let total = maps.records.len() as f64;
    let class_weight = [total / (2.0 * reliable as f64), total / (2.0 * unreliable as f64)];
    let width = maps.records[0].map.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(cfg.lr);
    let mut history = TrainHistory::default();
    let mut updates = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in plan_batches(maps.records.len(), cfg.batch_size, &mut rng) {
            let mut data = Vec::with_capacity(batch.len() * width);
            let mut labels = Vec::with_capacity(batch.len());
            let mut weights = Vec::with_capacity(batch.len());
            for &i in &batch {
                data.extend_from_slice(&maps.records[i].map);
                labels.push(maps.records[i].label);
                weights.push(class_weight[maps.records[i].label]);
            }
            let input = Tensor::from_vec(&[batch.len(), width], data)?;
            let logits = nan.forward_batch(&input, true)?;
            let (loss, _, dlogits) = softmax_xent_batch(&logits, &labels, Some(&weights))?;
            if !loss.is_finite() {
                return Err(NaelError::Training {
                    step: updates + 1,
                    msg: "non-finite NAN loss".into(),
                });
            }
            correct += batch_accuracy(&logits, &labels);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            nan.zero_grads();
            nan.backward(&dlogits)?;
            opt.begin_step();
            for (name, p) in nan.named_params() {
                opt.update(&name, p)?;
            }
            updates += 1;
        }
        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            updates,
        });
    }
    Ok(history)
}

/// Train the ARN on 12-class cross-entropy over all records, feeding it
/// the frozen PRN's reused stage output. Only ARN parameters change.
pub fn train_arn(
    arn: &mut Arn,
    prn: &mut Prn,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(NaelError::Degenerate("empty training dataset".into()));
    }
    let (h, w) = (dataset.height, dataset.width);
    let reuse = arn.config.arn_reuse_point;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(cfg.lr);
    let mut history = TrainHistory::default();
    let mut updates = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch in plan_batches(dataset.records.len(), cfg.batch_size, &mut rng) {
            let (input, labels) = batch_input(&dataset.records, &batch, h, w);
            // frozen stem: inference mode, no gradient, no stat updates
            let reused = prn.forward_to_stage(&input, reuse)?;
            let logits = arn.forward_batch(&reused, true)?;
            let (loss, _, dlogits) = softmax_xent_batch(&logits, &labels, None)?;
            if !loss.is_finite() {
                return Err(NaelError::Training {
                    step: updates + 1,
                    msg: "non-finite ARN loss".into(),
                });
            }
            correct += batch_accuracy(&logits, &labels);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            arn.zero_grads();
            arn.backward(&dlogits)?;
            opt.begin_step();
            for (name, p) in arn.named_params() {
                opt.update(&name, p)?;
            }
            updates += 1;
        }
        history.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            updates,
        });
    }
    Ok(history)
}
