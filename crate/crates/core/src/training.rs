//! SGD training loop with per-modality learning-rate multipliers, the
//! fusion-coefficient hook, metric logging and analytic FLOP accounting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::iemf::{self, IemfConfig, StrengthScores};
use crate::model::{Batch, LossOptions, ModelConfig, MultimodalModel, NeuronMode, ParamGroup, ParamKind};
use crate::tape::{GradientSet, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Vanilla,
    /// Static modality-specific learning-rate multipliers.
    Mslr,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MslrMultipliers {
    pub audio: f64,
    pub visual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub eta: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub method: Method,
    pub mslr: Option<MslrMultipliers>,
    pub iemf: IemfConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            eta: 5e-2,
            weight_decay: 1e-4,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            method: Method::Vanilla,
            mslr: None,
            iemf: IemfConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        // eta = 0 is accepted so frozen runs can be expressed
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be finite and non-negative, got {}", self.eta)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if let Some(m) = self.mslr {
            if !(m.audio > 0.0 && m.visual > 0.0) {
                return Err(Error::Config("MSLR multipliers must be positive".into()));
            }
        }
        if self.method == Method::Mslr && self.mslr.is_none() {
            return Err(Error::Config("method mslr needs multipliers".into()));
        }
        self.iemf.validate()
    }

    /// `(audio, visual)` learning-rate multipliers in effect.
    pub fn multipliers(&self) -> (f64, f64) {
        match (self.method, self.mslr) {
            (Method::Mslr, Some(m)) => (m.audio, m.visual),
            _ => (1.0, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_xi: f64,
    pub flops_cumulative: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiRecord {
    pub step: usize,
    pub epoch: usize,
    pub s_unimodal: f64,
    pub s_multimodal: f64,
    pub xi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub scores: StrengthScores,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: MultimodalModel,
    pub epochs: Vec<EpochMetrics>,
    pub xi_trace: Vec<XiRecord>,
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, _) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} rows", labels.len())));
    }
    let correct = labels.iter().enumerate().filter(|&(i, &y)| argmax(logits.row(i)) == y).count();
    Ok(correct as f64 / b as f64)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Computes every parameter's next value; nothing is written until all
/// updates are known to be finite.
pub fn sgd_updates(
    model: &MultimodalModel,
    grads: &GradientSet,
    cfg: &OptimConfig,
    xi: f64,
) -> Result<Vec<(ParamId, Tensor)>> {
    let (mult_a, mult_v) = cfg.multipliers();
    let (fw, fb) = model.fusion_ids();
    let mut updates = iemf::fusion_update(model, grads, cfg.eta, xi, cfg.weight_decay)?;
    for id in model.param_ids().filter(|&id| id != fw && id != fb) {
        let p = model.param(id);
        let g = grads.get(id).ok_or_else(|| Error::Contract(format!("missing gradient for {}", p.name)))?;
        g.check_finite(&p.name)?;
        let lr = cfg.eta
            * match p.group {
                ParamGroup::AudioEncoder => mult_a,
                ParamGroup::VisualEncoder => mult_v,
                _ => 1.0,
            };
        let wd = if p.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
        let next = p.value.zip_map(g, |x, gx| x - lr * (gx + wd * x))?;
        next.check_finite(&p.name)?;
        updates.push((id, next));
    }
    Ok(updates)
}

pub fn sgd_step(model: &mut MultimodalModel, grads: &GradientSet, cfg: &OptimConfig, xi: f64) -> Result<()> {
    for (id, value) in sgd_updates(model, grads, cfg, xi)? {
        model.set_param(id, value)?;
    }
    Ok(())
}

/// Forward, scores, coefficient, backward, update. A failing step leaves
/// the model untouched.
pub fn train_step(
    model: &mut MultimodalModel,
    batch: &Batch,
    cfg: &OptimConfig,
    opts: &LossOptions,
) -> Result<StepMetrics> {
    let (out, grads) = model.loss_and_grads(batch, opts)?;
    let scores = iemf::strength_scores(&out.p_a, &out.p_v, &out.p_av, &batch.y, &cfg.iemf)?;
    sgd_step(model, &grads, cfg, scores.xi)?;
    let accuracy = top1_accuracy(&out.logits_av, &batch.y)?;
    Ok(StepMetrics { scores, loss: out.loss, accuracy })
}

/// Batched fused-logit accuracy.
pub fn evaluate(model: &MultimodalModel, data: &Batch, batch_size: usize) -> Result<f64> {
    let mut correct = 0.0;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let b = data.select(chunk)?;
        correct += top1_accuracy(&model.predict(&b)?, &b.y)? * chunk.len() as f64;
    }
    Ok(correct / data.len() as f64)
}

/// Seeded per-epoch permutation split into batches; the short tail batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn train(model: MultimodalModel, dataset: &Dataset, cfg: &OptimConfig) -> Result<TrainResult> {
    train_with(model, dataset, cfg, |_, _| Ok(()))
}

/// Training loop; `on_epoch` sees each finished epoch and its ξ records so
/// callers can flush logs incrementally.
pub fn train_with(
    mut model: MultimodalModel,
    dataset: &Dataset,
    cfg: &OptimConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &[XiRecord]) -> Result<()>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::Contract("training needs non-empty train and test splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = flops_per_epoch(&model.config, dataset.train.len(), cfg.batch_size);
    let opts = LossOptions::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut xi_trace = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let first = xi_trace.len();
        let (mut loss_sum, mut correct, mut xi_sum) = (0.0, 0.0, 0.0);
        let batches = epoch_batches(dataset.train.len(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let batch = dataset.train.select(idx)?;
            let m = train_step(&mut model, &batch, cfg, &opts)?;
            let n = idx.len() as f64;
            loss_sum += m.loss * n;
            correct += m.accuracy * n;
            xi_sum += m.scores.xi;
            xi_trace.push(XiRecord {
                step,
                epoch,
                s_unimodal: m.scores.s_unimodal,
                s_multimodal: m.scores.s_multimodal,
                xi: m.scores.xi,
            });
            step += 1;
        }
        let n = dataset.train.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct / n,
            test_acc: evaluate(&model, &dataset.test, cfg.batch_size.max(256))?,
            mean_xi: xi_sum / batches.len() as f64,
            flops_cumulative: per_epoch * epoch as u64,
        };
        on_epoch(&metrics, &xi_trace[first..])?;
        epochs.push(metrics);
    }
    Ok(TrainResult { model, epochs, xi_trace })
}

/// One term of the analytic cost model, priced per batch row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlopTerm {
    /// `[rows × k] · [k × n]` costs `2·rows·k·n`.
    Matmul { k: usize, n: usize, repeat: usize },
    /// One operation per element of a `rows × width` tensor.
    Elementwise { width: usize, repeat: usize },
}

/// Analytic forward cost of a network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopModel {
    pub terms: Vec<FlopTerm>,
}

pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

impl FlopModel {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        let mut terms = Vec::new();
        let steps = match cfg.neuron_mode {
            NeuronMode::Continuous => 1,
            NeuronMode::Spiking => cfg.lif.steps,
        };
        for d_in in [cfg.d_in_a, cfg.d_in_v] {
            for (k, n) in cfg.encoder_widths(d_in) {
                terms.push(FlopTerm::Matmul { k, n, repeat: steps });
                terms.push(FlopTerm::Elementwise { width: n, repeat: steps }); // bias
                match cfg.neuron_mode {
                    NeuronMode::Continuous => terms.push(FlopTerm::Elementwise { width: n, repeat: 1 }),
                    // leak, accumulate, fire, reset multiply, reset subtract
                    NeuronMode::Spiking => terms.push(FlopTerm::Elementwise { width: n, repeat: 5 * steps }),
                }
            }
            if cfg.neuron_mode == NeuronMode::Spiking {
                terms.push(FlopTerm::Elementwise { width: cfg.latent, repeat: steps });
                // rate average
            }
        }
        let m = cfg.n_classes;
        for k in [2 * cfg.latent, cfg.latent, cfg.latent] {
            terms.push(FlopTerm::Matmul { k, n: m, repeat: 1 });
            terms.push(FlopTerm::Elementwise { width: m, repeat: 1 });
            // softmax cross-entropy: exponentiate, normalise, log-loss
            terms.push(FlopTerm::Elementwise { width: m, repeat: 3 });
        }
        Self { terms }
    }

    pub fn forward(&self, rows: usize) -> u64 {
        self.terms
            .iter()
            .map(|t| match *t {
                FlopTerm::Matmul { k, n, repeat } => repeat as u64 * matmul_flops(rows, k, n),
                FlopTerm::Elementwise { width, repeat } => (repeat * rows * width) as u64,
            })
            .sum()
    }

    /// Forward plus backward, the latter priced at twice the forward.
    pub fn train_step(&self, rows: usize) -> u64 {
        3 * self.forward(rows)
    }

    pub fn per_epoch(&self, n_train: usize, batch_size: usize) -> u64 {
        let full = n_train / batch_size;
        let tail = n_train % batch_size;
        full as u64 * self.train_step(batch_size) + if tail > 0 { self.train_step(tail) } else { 0 }
    }
}

/// Training FLOPs for one epoch over `n_train` samples.
pub fn flops_per_epoch(cfg: &ModelConfig, n_train: usize, batch_size: usize) -> u64 {
    FlopModel::from_config(cfg).per_epoch(n_train, batch_size.max(1))
}
