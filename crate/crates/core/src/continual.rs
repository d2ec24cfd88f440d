//! Class-incremental task streams, sequential training (naive fine-tuning or
//! distillation against the previous model) and forgetting metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Batch, Distillation, LossOptions, MultimodalModel};
use crate::tape::Tape;
use crate::tensor::{masked_softmax, Tensor};
use crate::training::{self, epoch_batches, OptimConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub train: Batch,
    pub test: Batch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub n_classes: usize,
    pub tasks: Vec<Task>,
}

fn restrict(batch: &Batch, classes: &[usize]) -> Result<Batch> {
    let idx: Vec<usize> = (0..batch.len()).filter(|&i| classes.contains(&batch.y[i])).collect();
    if idx.is_empty() {
        return Err(Error::Config(format!("no samples for classes {classes:?}")));
    }
    batch.select(&idx)
}

/// Splits `K · classes_per_task` seeded-randomly chosen classes into `K` tasks.
pub fn build_task_stream(dataset: &Dataset, k: usize, classes_per_task: usize, seed: u64) -> Result<TaskStream> {
    let m = dataset.spec.n_classes;
    if k == 0 || classes_per_task == 0 {
        return Err(Error::Config("need at least one task with at least one class".into()));
    }
    if k * classes_per_task > m {
        return Err(Error::Config(format!("{k} tasks x {classes_per_task} classes exceeds the {m} available classes")));
    }
    let mut classes: Vec<usize> = (0..m).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tasks = classes[..k * classes_per_task]
        .chunks(classes_per_task)
        .map(|chunk| {
            let mut cls = chunk.to_vec();
            cls.sort_unstable();
            Ok(Task { train: restrict(&dataset.train, &cls)?, test: restrict(&dataset.test, &cls)?, classes: cls })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream { n_classes: m, tasks })
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    fn mask_of<'a>(&self, tasks: impl Iterator<Item = &'a Task>) -> Vec<bool> {
        let mut mask = vec![false; self.n_classes];
        tasks.flat_map(|t| &t.classes).for_each(|&c| mask[c] = true);
        mask
    }

    /// Classes of tasks `0..=k`.
    pub fn seen_mask(&self, k: usize) -> Vec<bool> {
        self.mask_of(self.tasks[..=k].iter())
    }

    pub fn task_mask(&self, k: usize) -> Vec<bool> {
        self.mask_of(std::iter::once(&self.tasks[k]))
    }

    /// Union of the test sets of tasks `0..=k`.
    pub fn cumulative_test(&self, k: usize) -> Result<Batch> {
        let mask = self.seen_mask(k);
        let mut xa = Vec::new();
        let mut xv = Vec::new();
        let mut y = Vec::new();
        for t in &self.tasks[..=k] {
            xa.extend_from_slice(t.test.x_a.data());
            xv.extend_from_slice(t.test.x_v.data());
            y.extend_from_slice(&t.test.y);
        }
        debug_assert!(y.iter().all(|&c| mask[c]));
        let n = y.len();
        Batch::new(
            Tensor::new(vec![n, t_width(&self.tasks[0].test.x_a)], xa)?,
            Tensor::new(vec![n, t_width(&self.tasks[0].test.x_v)], xv)?,
            y,
        )
    }
}

fn t_width(t: &Tensor) -> usize {
    t.shape()[1]
}

/// Lower-triangular table `a[k][j]`: accuracy on task `j` after learning task `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(k: usize) -> Self {
        Self { rows: (1..=k).map(|len| vec![None; len]).collect() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (k, row) in rows.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(Error::Contract(format!("row {} has {} entries, expected {}", k + 1, row.len(), k + 1)));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(k, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    /// Zero-based `k ≥ j`.
    pub fn set(&mut self, k: usize, j: usize, acc: f64) -> Result<()> {
        if j > k || k >= self.rows.len() {
            return Err(Error::Index(format!("entry ({k}, {j}) outside the lower triangle")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Contract(format!("accuracy {acc} outside [0, 1]")));
        }
        self.rows[k][j] = Some(acc);
        Ok(())
    }

    pub fn get(&self, k: usize, j: usize) -> Option<f64> {
        self.rows.get(k).and_then(|r| r.get(j)).copied().flatten()
    }

    /// Complete rows, or a contract error naming the first missing entry.
    pub fn complete_rows(&self) -> Result<Vec<Vec<f64>>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(k, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| {
                        v.ok_or_else(|| Error::Contract(format!("missing accuracy entry ({}, {})", k + 1, j + 1)))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Per-step average accuracy and their mean (average incremental accuracy).
pub fn aa_aia(matrix: &AccuracyMatrix) -> Result<(Vec<f64>, f64)> {
    let rows = matrix.complete_rows()?;
    if rows.is_empty() {
        return Err(Error::Contract("empty accuracy matrix".into()));
    }
    let aa: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let aia = aa.iter().sum::<f64>() / aa.len() as f64;
    Ok((aa, aia))
}

/// Average forgetting rate.
#[allow(clippy::needless_range_loop)]
///
/// `F_k = mean_{j<k} [max_{j≤ℓ<k} a[ℓ][j] − a[k][j]]`, averaged over `k = 2..K`.
pub fn afr(matrix: &AccuracyMatrix) -> Result<f64> {
    let rows = matrix.complete_rows()?;
    let k_total = rows.len();
    if k_total < 2 {
        return Err(Error::Contract("forgetting needs at least two tasks".into()));
    }
    let mut total = 0.0;
    for k in 1..k_total {
        let mut fk = 0.0;
        for j in 0..k {
            let best = (j..k).map(|l| rows[l][j]).fold(f64::NEG_INFINITY, f64::max);
            fk += best - rows[k][j];
        }
        total += fk / k as f64;
    }
    Ok(total / (k_total - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinualMethod {
    #[default]
    Finetune,
    Lwf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub method: ContinualMethod,
    pub temperature: f64,
    pub lambda: f64,
    /// Learning rate for tasks after the first; `None` keeps `optim.eta`.
    pub later_eta: Option<f64>,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            tasks: 3,
            classes_per_task: 2,
            method: ContinualMethod::Finetune,
            temperature: 2.0,
            lambda: 1.0,
            later_eta: None,
        }
    }
}

impl ContinualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Config("tasks and classes_per_task must be at least 1".into()));
        }
        if !(self.temperature > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("temperature must be positive and lambda non-negative".into()));
        }
        if self.later_eta.is_some_and(|e| !(e >= 0.0 && e.is_finite())) {
            return Err(Error::Config("later_eta must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Softened previous-model probabilities over `seen` classes.
pub fn distill_target(old_logits: &Tensor, seen: &[bool], temperature: f64) -> Result<Tensor> {
    let (b, m) = old_logits.dims2()?;
    let mut out = Vec::with_capacity(b * m);
    for i in 0..b {
        let scaled: Vec<f64> = old_logits.row(i).iter().map(|z| z / temperature).collect();
        out.extend(masked_softmax(&scaled, Some(seen)));
    }
    Tensor::new(vec![b, m], out)
}

/// Cross-entropy on current-task classes plus `λ·T²·KL(old ‖ new)` on
/// previously seen classes; the distillation term vanishes when none are seen.
pub fn lwf_loss(
    new_logits: &Tensor,
    old_logits: &Tensor,
    labels: &[usize],
    current_mask: &[bool],
    seen_mask: &[bool],
    temperature: f64,
    lambda: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(new_logits.clone());
    let ce = tape.softmax_cross_entropy(z, labels, Some(current_mask))?;
    if !seen_mask.iter().any(|&s| s) || lambda == 0.0 {
        return Ok(tape.value(ce).item());
    }
    let target = distill_target(old_logits, seen_mask, temperature)?;
    let kl = tape.soft_target_kl(z, target, Some(seen_mask), temperature)?;
    Ok(tape.value(ce).item() + lambda * tape.value(kl).item())
}

/// Trains the tasks in order and fills the accuracy matrix.
pub fn train_incremental(
    stream: &TaskStream,
    mut model: MultimodalModel,
    optim: &OptimConfig,
    cfg: &ContinualConfig,
) -> Result<(AccuracyMatrix, MultimodalModel)> {
    optim.validate()?;
    cfg.validate()?;
    if model.config.n_classes != stream.n_classes {
        return Err(Error::Config(format!(
            "model has {} outputs but the stream spans {} classes",
            model.config.n_classes, stream.n_classes
        )));
    }
    let mut matrix = AccuracyMatrix::new(stream.len());
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    for (k, task) in stream.tasks.iter().enumerate() {
        let mut task_cfg = optim.clone();
        if k > 0 {
            if let Some(eta) = cfg.later_eta {
                task_cfg.eta = eta;
            }
        }
        let previous = (k > 0 && cfg.method == ContinualMethod::Lwf).then(|| model.clone());
        let old_seen = if k > 0 { stream.seen_mask(k - 1) } else { vec![false; stream.n_classes] };
        let loss_mask = match cfg.method {
            ContinualMethod::Finetune => stream.seen_mask(k),
            ContinualMethod::Lwf => stream.task_mask(k),
        };
        for _ in 0..optim.epochs {
            for idx in epoch_batches(task.train.len(), optim.batch_size, &mut rng) {
                let batch = task.train.select(&idx)?;
                let distill = match &previous {
                    Some(old) if cfg.lambda > 0.0 => Some(Distillation {
                        target: distill_target(&old.predict(&batch)?, &old_seen, cfg.temperature)?,
                        mask: old_seen.clone(),
                        temperature: cfg.temperature,
                        weight: cfg.lambda,
                    }),
                    _ => None,
                };
                let opts = LossOptions { class_mask: Some(loss_mask.clone()), distill };
                training::train_step(&mut model, &batch, &task_cfg, &opts)?;
            }
        }
        for (j, seen_task) in stream.tasks[..=k].iter().enumerate() {
            matrix.set(k, j, training::evaluate(&model, &seen_task.test, 256)?)?;
        }
    }
    Ok((matrix, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DataSpec};

    fn m(rows: &[Vec<f64>]) -> AccuracyMatrix {
        AccuracyMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn aa_aia_cases() {
        let (aa, aia) = aa_aia(&m(&[vec![0.8]])).unwrap();
        assert_eq!((aa, aia), (vec![0.8], 0.8));
        let (aa, aia) = aa_aia(&m(&[vec![0.8], vec![0.7, 0.6]])).unwrap();
        assert!((aa[0] - 0.8).abs() < 1e-15 && (aa[1] - 0.65).abs() < 1e-15);
        assert!((aia - 0.725).abs() < 1e-15);
        let (_, aia) = aa_aia(&m(&[vec![0.4], vec![0.4, 0.4], vec![0.4, 0.4, 0.4]])).unwrap();
        assert!((aia - 0.4).abs() < 1e-15);
    }

    #[test]
    fn missing_entry_is_a_contract_error() {
        let mut mat = AccuracyMatrix::new(2);
        mat.set(0, 0, 0.5).unwrap();
        mat.set(1, 1, 0.5).unwrap();
        assert!(matches!(aa_aia(&mat), Err(Error::Contract(_))));
        assert!(matches!(AccuracyMatrix::from_rows(&[vec![0.5, 0.5]]), Err(Error::Contract(_))));
        assert!(matches!(mat.set(0, 1, 0.5), Err(Error::Index(_))));
    }

    #[test]
    fn afr_worked_example() {
        let mat = m(&[vec![0.90], vec![0.80, 0.85], vec![0.70, 0.75, 0.88]]);
        assert!((afr(&mat).unwrap() - 0.125).abs() < 1e-12);
        let two = m(&[vec![0.90], vec![0.80, 0.85]]);
        assert!((afr(&two).unwrap() - 0.10).abs() < 1e-12);
    }

    #[test]
    fn afr_edge_cases() {
        assert_eq!(afr(&m(&[vec![0.5], vec![0.5, 0.5], vec![0.5, 0.5, 0.5]])).unwrap(), 0.0);
        assert!(afr(&m(&[vec![0.5], vec![0.6, 0.7], vec![0.8, 0.9, 0.1]])).unwrap() <= 0.0);
        assert!(matches!(afr(&m(&[vec![0.5]])), Err(Error::Contract(_))));
    }

    fn small_data() -> Dataset {
        generate(&DataSpec {
            n_classes: 6,
            d_in_a: 4,
            d_in_v: 4,
            train_per_class: 10,
            test_per_class: 4,
            ..DataSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn task_streams_are_disjoint() {
        let ds = small_data();
        let s = build_task_stream(&ds, 3, 2, 7).unwrap();
        assert_eq!(s.len(), 3);
        let mut all: Vec<usize> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        assert!(s.tasks.iter().all(|t| t.classes.len() == 2));
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        for t in &s.tasks {
            assert!(t.train.y.iter().chain(&t.test.y).all(|c| t.classes.contains(c)));
            assert_eq!(t.train.len(), 20);
        }
        assert_eq!(s.cumulative_test(1).unwrap().len(), 16);
        assert!(matches!(build_task_stream(&ds, 4, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn single_task_covers_chosen_classes() {
        let ds = small_data();
        let s = build_task_stream(&ds, 1, 6, 0).unwrap();
        assert_eq!(s.tasks[0].train.len(), ds.train.len());
        assert_eq!(s.tasks[0].test.len(), ds.test.len());
    }

    #[test]
    fn lwf_loss_reduces_to_masked_ce() {
        let z = Tensor::from_rows(&[vec![0.3, 1.2, -0.4, 0.0]]).unwrap();
        let old = Tensor::from_rows(&[vec![1.0, -1.0, 0.5, 0.0]]).unwrap();
        let cur = [false, false, true, true];
        let seen = [true, true, false, false];
        let ce_only = lwf_loss(&z, &old, &[2], &cur, &seen, 2.0, 0.0).unwrap();
        // masked CE by hand: -ln(e^-0.4 / (e^-0.4 + e^0))
        let expect = -((-0.4f64).exp() / ((-0.4f64).exp() + 1.0)).ln();
        assert!((ce_only - expect).abs() < 1e-14);
        // identical logits: no distillation penalty
        assert!((lwf_loss(&z, &z, &[2], &cur, &seen, 2.0, 1.0).unwrap() - expect).abs() < 1e-14);
        // nothing seen yet
        assert_eq!(lwf_loss(&z, &old, &[2], &cur, &[false; 4], 2.0, 1.0).unwrap(), ce_only);
    }

    #[test]
    fn lwf_two_class_hand_value() {
        // seen classes {0, 1}, T = 2, current task class 2 only.
        let z = Tensor::from_rows(&[vec![1.0, 0.0, 0.5]]).unwrap();
        let old = Tensor::from_rows(&[vec![0.0, 2.0, 3.0]]).unwrap();
        let t = 2.0f64;
        let q0 = 1.0 / (1.0 + (1.0f64).exp()); // old: softmax([0, 1])
        let q1 = 1.0 - q0;
        let p0 = (0.5f64).exp() / ((0.5f64).exp() + 1.0); // new: softmax([0.5, 0])
        let p1 = 1.0 - p0;
        let kl = q0 * (q0 / p0).ln() + q1 * (q1 / p1).ln();
        let expect = 0.0 + 0.7 * t * t * kl; // single active class: CE = 0
        let got = lwf_loss(&z, &old, &[2], &[false, false, true], &[true, true, false], t, 0.7).unwrap();
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
    }
}
