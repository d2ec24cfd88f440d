//! Two-branch encoder network with concatenation fusion and per-modality
//! probe heads, in continuous (ReLU) or spiking (LIF) form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{lif_layer_on_tape, LifParams};
use crate::tape::{GradientSet, ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronMode {
    Continuous,
    Spiking,
}

/// Whether probe-head losses reach the encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    ProbeDetached,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    AudioEncoder,
    VisualEncoder,
    Fusion,
    HeadAudio,
    HeadVisual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_in_a: usize,
    pub d_in_v: usize,
    pub n_classes: usize,
    /// Encoder layer count per branch.
    pub depth: usize,
    pub hidden: usize,
    /// Encoder output width (`d_a = d_v`).
    pub latent: usize,
    pub neuron_mode: NeuronMode,
    pub lif: LifParams,
    pub head_mode: HeadMode,
    /// Weight of the averaged probe-head losses in the total loss.
    pub head_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in_a: 32,
            d_in_v: 32,
            n_classes: 6,
            depth: 2,
            hidden: 32,
            latent: 16,
            neuron_mode: NeuronMode::Continuous,
            lif: LifParams::default(),
            head_mode: HeadMode::ProbeDetached,
            head_weight: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in_a == 0 || self.d_in_v == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("encoders need at least one layer".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if !(self.head_weight >= 0.0 && self.head_weight.is_finite()) {
            return Err(Error::Config("head_weight must be a finite non-negative number".into()));
        }
        if self.neuron_mode == NeuronMode::Spiking {
            self.lif.validate()?;
        }
        Ok(())
    }

    /// `(in, out)` widths of each encoder layer for an input of width `d_in`.
    pub fn encoder_widths(&self, d_in: usize) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let inp = if l == 0 { d_in } else { self.hidden };
                let out = if l + 1 == self.depth { self.latent } else { self.hidden };
                (inp, out)
            })
            .collect()
    }
}

/// Aligned mini-batch of both modalities and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x_a: Tensor,
    pub x_v: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(x_a: Tensor, x_v: Tensor, y: Vec<usize>) -> Result<Self> {
        let (ba, _) = x_a.dims2()?;
        let (bv, _) = x_v.dims2()?;
        if ba != bv || ba != y.len() {
            return Err(Error::Shape(format!("inconsistent batch sizes: audio {ba}, visual {bv}, labels {}", y.len())));
        }
        Ok(Self { x_a, x_v, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            x_a: self.x_a.select_rows(idx)?,
            x_v: self.x_v.select_rows(idx)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
        })
    }
}

/// Optional loss shaping used by class-incremental training.
#[derive(Clone, Debug, Default)]
pub struct LossOptions {
    /// Classes allowed in the cross-entropy normalisation.
    pub class_mask: Option<Vec<bool>>,
    pub distill: Option<Distillation>,
}

/// Soft-target term added to the fused loss: `weight · T² · KL(target ‖ softmax(z/T))`.
#[derive(Clone, Debug)]
pub struct Distillation {
    pub target: Tensor,
    pub mask: Vec<bool>,
    pub temperature: f64,
    pub weight: f64,
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub z_a: Tensor,
    pub z_v: Tensor,
    pub logits_av: Tensor,
    pub logits_a: Tensor,
    pub logits_v: Tensor,
    pub p_av: Tensor,
    pub p_a: Tensor,
    pub p_v: Tensor,
    pub loss_fused: f64,
    /// Weighted probe-head term.
    pub loss_heads: f64,
    pub loss_distill: f64,
    pub loss: f64,
}

/// Tape handles of a recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub z_a: Var,
    pub z_v: Var,
    pub logits_av: Var,
    pub logits_a: Var,
    pub logits_v: Var,
    pub ce_av: Var,
    pub ce_a: Var,
    pub ce_v: Var,
    /// `½ · head_weight · (CE_a + CE_v)`.
    pub heads: Var,
    pub loss: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalModel {
    pub config: ModelConfig,
    params: Vec<Param>,
    audio_layers: Vec<(ParamId, ParamId)>,
    visual_layers: Vec<(ParamId, ParamId)>,
    fusion: (ParamId, ParamId),
    head_a: (ParamId, ParamId),
    head_v: (ParamId, ParamId),
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl MultimodalModel {
    /// Fresh model with `U(-1/√fan_in, 1/√fan_in)` initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut add = |rng: &mut ChaCha8Rng, name: String, group, out: usize, inp: usize| {
            let bound = 1.0 / (inp as f64).sqrt();
            let w = ParamId(params.len());
            params.push(Param {
                name: format!("{name}.weight"),
                group,
                kind: ParamKind::Weight,
                value: uniform_tensor(rng, &[out, inp], bound),
            });
            let b = ParamId(params.len());
            params.push(Param {
                name: format!("{name}.bias"),
                group,
                kind: ParamKind::Bias,
                value: uniform_tensor(rng, &[out], bound),
            });
            (w, b)
        };
        let audio_layers = config
            .encoder_widths(config.d_in_a)
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| add(&mut rng, format!("audio.{l}"), ParamGroup::AudioEncoder, o, i))
            .collect();
        let visual_layers = config
            .encoder_widths(config.d_in_v)
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| add(&mut rng, format!("visual.{l}"), ParamGroup::VisualEncoder, o, i))
            .collect();
        let m = config.n_classes;
        let fusion = add(&mut rng, "fusion".into(), ParamGroup::Fusion, m, 2 * config.latent);
        let head_a = add(&mut rng, "head_a".into(), ParamGroup::HeadAudio, m, config.latent);
        let head_v = add(&mut rng, "head_v".into(), ParamGroup::HeadVisual, m, config.latent);
        Ok(Self { config, params, audio_layers, visual_layers, fusion, head_a, head_v })
    }

    /// Rebuilds a model from a configuration and named parameter values.
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", model.params.len(), named.len())));
        }
        for (name, value) in named {
            let id = model
                .params
                .iter()
                .position(|p| &p.name == name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            model.set_param(ParamId(id), value.clone())?;
        }
        Ok(model)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.param_ids().filter(|&id| self.params[id.0].group == group).collect()
    }

    pub fn set_param(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = self.params.get_mut(id.0).ok_or_else(|| Error::Index(format!("no parameter {}", id.0)))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{}: expected shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        value.check_finite(&slot.name)?;
        slot.value = value;
        Ok(())
    }

    pub fn fusion_ids(&self) -> (ParamId, ParamId) {
        self.fusion
    }

    pub fn head_ids(&self) -> ((ParamId, ParamId), (ParamId, ParamId)) {
        (self.head_a, self.head_v)
    }

    pub fn encoder_layer_ids(&self, group: ParamGroup) -> &[(ParamId, ParamId)] {
        match group {
            ParamGroup::AudioEncoder => &self.audio_layers,
            ParamGroup::VisualEncoder => &self.visual_layers,
            _ => &[],
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        self.params.iter().try_for_each(|p| p.value.check_finite(&p.name))
    }

    fn put(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, self.params[id.0].value.clone())
    }

    fn encode_branch(&self, tape: &mut Tape, x: Var, layers: &[(ParamId, ParamId)]) -> Result<Var> {
        match self.config.neuron_mode {
            NeuronMode::Continuous => {
                let mut h = x;
                for &(w, b) in layers {
                    let (w, b) = (self.put(tape, w), self.put(tape, b));
                    let pre = tape.linear(h, w, b)?;
                    h = tape.relu(pre)?;
                }
                Ok(h)
            }
            NeuronMode::Spiking => {
                let lif = &self.config.lif;
                let steps = lif.steps;
                let mut trains: Vec<Var> = Vec::new();
                for (l, &(w, b)) in layers.iter().enumerate() {
                    let (w, b) = (self.put(tape, w), self.put(tape, b));
                    let currents = if l == 0 {
                        // direct coding: the same current at every step
                        vec![tape.linear(x, w, b)?; steps]
                    } else {
                        trains.iter().map(|&s| tape.linear(s, w, b)).collect::<Result<Vec<_>>>()?
                    };
                    trains = lif_layer_on_tape(tape, &currents, lif)?;
                }
                // rate decoding
                let mut acc = trains[0];
                for &s in &trains[1..] {
                    acc = tape.add(acc, s)?;
                }
                tape.scale(acc, 1.0 / steps as f64)
            }
        }
    }

    fn check_widths(&self, batch: &Batch) -> Result<()> {
        let (_, da) = batch.x_a.dims2()?;
        let (_, dv) = batch.x_v.dims2()?;
        if da != self.config.d_in_a || dv != self.config.d_in_v {
            return Err(Error::Shape(format!(
                "input widths ({da}, {dv}) do not match the model ({}, {})",
                self.config.d_in_a, self.config.d_in_v
            )));
        }
        Ok(())
    }

    /// Records both encoders; returns `(z_a, z_v)`.
    pub fn encode_on_tape(&self, tape: &mut Tape, batch: &Batch) -> Result<(Var, Var)> {
        self.check_widths(batch)?;
        let xa = tape.leaf(batch.x_a.clone());
        let xv = tape.leaf(batch.x_v.clone());
        let za = self.encode_branch(tape, xa, &self.audio_layers)?;
        let zv = self.encode_branch(tape, xv, &self.visual_layers)?;
        Ok((za, zv))
    }

    /// `W_f · [z_a ; z_v] + b_f` for every row.
    pub fn fuse_on_tape(&self, tape: &mut Tape, za: Var, zv: Var) -> Result<Var> {
        let z = tape.concat_cols(za, zv)?;
        let (w, b) = (self.put(tape, self.fusion.0), self.put(tape, self.fusion.1));
        tape.linear(z, w, b)
    }

    /// Full forward pass: latents, fused and probe logits, and the total loss.
    pub fn forward_on_tape(&self, tape: &mut Tape, batch: &Batch, opts: &LossOptions) -> Result<ForwardVars> {
        let (za, zv) = self.encode_on_tape(tape, batch)?;
        let logits_av = self.fuse_on_tape(tape, za, zv)?;
        let (ha, hv) = match self.config.head_mode {
            HeadMode::ProbeDetached => (tape.detach(za)?, tape.detach(zv)?),
            HeadMode::Joint => (za, zv),
        };
        let (wa, ba) = (self.put(tape, self.head_a.0), self.put(tape, self.head_a.1));
        let logits_a = tape.linear(ha, wa, ba)?;
        let (wv, bv) = (self.put(tape, self.head_v.0), self.put(tape, self.head_v.1));
        let logits_v = tape.linear(hv, wv, bv)?;

        let mask = opts.class_mask.as_deref();
        let ce_av = tape.softmax_cross_entropy(logits_av, &batch.y, mask)?;
        let ce_a = tape.softmax_cross_entropy(logits_a, &batch.y, mask)?;
        let ce_v = tape.softmax_cross_entropy(logits_v, &batch.y, mask)?;

        let heads = tape.add(ce_a, ce_v)?;
        let heads = tape.scale(heads, 0.5 * self.config.head_weight)?;
        let mut loss = tape.add(ce_av, heads)?;
        if let Some(d) = &opts.distill {
            let kl = tape.soft_target_kl(logits_av, d.target.clone(), Some(&d.mask), d.temperature)?;
            let kl = tape.scale(kl, d.weight)?;
            loss = tape.add(loss, kl)?;
        }
        Ok(ForwardVars { z_a: za, z_v: zv, logits_av, logits_a, logits_v, ce_av, ce_a, ce_v, heads, loss })
    }

    pub fn outputs_from_tape(tape: &Tape, vars: &ForwardVars) -> ForwardOutputs {
        let probs = |v: Var| tape.probs(v).expect("loss node").clone();
        let loss_fused = tape.value(vars.ce_av).item();
        let loss_heads = tape.value(vars.heads).item();
        let loss = tape.value(vars.loss).item();
        ForwardOutputs {
            z_a: tape.value(vars.z_a).clone(),
            z_v: tape.value(vars.z_v).clone(),
            logits_av: tape.value(vars.logits_av).clone(),
            logits_a: tape.value(vars.logits_a).clone(),
            logits_v: tape.value(vars.logits_v).clone(),
            p_av: probs(vars.ce_av),
            p_a: probs(vars.ce_a),
            p_v: probs(vars.ce_v),
            loss_fused,
            loss_heads,
            loss_distill: loss - loss_fused - loss_heads,
            loss,
        }
    }

    pub fn encode(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (za, zv) = self.encode_on_tape(&mut tape, batch)?;
        Ok((tape.value(za).clone(), tape.value(zv).clone()))
    }

    pub fn fuse_concat(&self, z_a: &Tensor, z_v: &Tensor) -> Result<Tensor> {
        let (_, da) = z_a.dims2()?;
        let (_, dv) = z_v.dims2()?;
        let (_, wf) = self.params[self.fusion.0 .0].value.dims2()?;
        if da + dv != wf {
            return Err(Error::Shape(format!("latent widths {da}+{dv} do not match fusion input {wf}")));
        }
        let mut tape = Tape::new();
        let (a, v) = (tape.leaf(z_a.clone()), tape.leaf(z_v.clone()));
        let out = self.fuse_on_tape(&mut tape, a, v)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_full(&self, batch: &Batch) -> Result<ForwardOutputs> {
        self.forward_with(batch, &LossOptions::default())
    }

    pub fn forward_with(&self, batch: &Batch, opts: &LossOptions) -> Result<ForwardOutputs> {
        let mut tape = Tape::new();
        let vars = self.forward_on_tape(&mut tape, batch, opts)?;
        Ok(Self::outputs_from_tape(&tape, &vars))
    }

    /// Forward pass plus gradients of the total loss.
    pub fn loss_and_grads(&self, batch: &Batch, opts: &LossOptions) -> Result<(ForwardOutputs, GradientSet)> {
        let mut tape = Tape::new();
        let vars = self.forward_on_tape(&mut tape, batch, opts)?;
        let grads = tape.backward(vars.loss)?;
        Ok((Self::outputs_from_tape(&tape, &vars), grads))
    }

    /// Fused logits only.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (za, zv) = self.encode_on_tape(&mut tape, batch)?;
        let out = self.fuse_on_tape(&mut tape, za, zv)?;
        Ok(tape.value(out).clone())
    }
}
