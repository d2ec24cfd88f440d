//! Inverse-effectiveness fusion modulation.
//!
//! Each step compares how confidently the two probe heads predict the true
//! label against how confidently the fused output does. When the probes are
//! weak relative to the fusion, the fusion layer's step is enlarged; when
//! they are strong, it is damped. The coefficient lives in `(0, 2γ)`, so the
//! descent direction is never reversed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MultimodalModel, ParamKind};
use crate::tape::GradientSet;
use crate::tensor::Tensor;

/// Denominator guard on the fused score.
pub const EPSILON_DIV: f64 = 1e-12;

/// Bounded odd saturating map applied to `1 - S_uni / S_multi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    #[default]
    Tanh,
    /// `x / (1 + |x|)`
    Softsign,
    /// `(2/π)·atan(πx/2)`
    Arctan,
}

impl Gating {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Gating::Tanh => x.tanh(),
            Gating::Softsign => x / (1.0 + x.abs()),
            Gating::Arctan => std::f64::consts::FRAC_2_PI * (std::f64::consts::FRAC_PI_2 * x).atan(),
        }
    }

    /// `1 + κ(x)` without the cancellation `1 + κ(x)` suffers for large
    /// negative `x`. Results below the normal range are raised to
    /// `f64::MIN_POSITIVE` so the value stays strictly positive.
    pub fn one_plus(self, x: f64) -> f64 {
        if x >= 0.0 {
            return 1.0 + self.apply(x);
        }
        let v = match self {
            // 1 + tanh(x) = 2 / (1 + e^{-2x})
            Gating::Tanh => 2.0 / (1.0 + (-2.0 * x).exp()),
            Gating::Softsign => 1.0 / (1.0 - x),
            // π/2 + atan(y) = atan(1/|y|) for y < 0
            Gating::Arctan => std::f64::consts::FRAC_2_PI * (1.0 / (std::f64::consts::FRAC_PI_2 * -x)).atan(),
        };
        v.max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IemfConfig {
    /// Inverse gain; the coefficient lies in `(0, 2·gamma)`.
    pub gamma: f64,
    pub gating: Gating,
    pub enabled: bool,
}

impl Default for IemfConfig {
    fn default() -> Self {
        Self { gamma: 1.0, gating: Gating::Tanh, enabled: true }
    }
}

impl IemfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Batch scores and the resulting coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrengthScores {
    pub s_unimodal: f64,
    pub s_multimodal: f64,
    pub xi: f64,
    pub batch_size: usize,
}

/// Probability each row assigns to its label.
pub fn per_sample_content(probs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (b, m) = probs.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} probability rows", labels.len())));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= m {
                Err(Error::Index(format!("label {y} out of range for {m} classes")))
            } else {
                Ok(probs.get(i, y))
            }
        })
        .collect()
}

/// `(S_unimodal, S_multimodal)`: the mean of the two probe contents and the
/// mean fused content.
pub fn batch_strength_scores(c_a: &[f64], c_v: &[f64], c_av: &[f64]) -> Result<(f64, f64)> {
    let b = c_av.len();
    if b == 0 {
        return Err(Error::Contract("strength scores of an empty batch".into()));
    }
    if c_a.len() != b || c_v.len() != b {
        return Err(Error::Contract(format!("content vectors differ in length: {}, {}, {b}", c_a.len(), c_v.len())));
    }
    let uni: f64 = c_a.iter().zip(c_v).map(|(a, v)| a + v).sum();
    let multi: f64 = c_av.iter().sum();
    Ok((uni / (2.0 * b as f64), multi / b as f64))
}

/// `γ · (1 + κ(1 − S_uni / S_multi))`, or `γ` when the fused score is degenerate.
///
/// A ratio within an ulp of 1 can round onto `γ`; the result is nudged one
/// ulp so that ratio `>`, `=`, `<` 1 always gives `ξ <`, `=`, `> γ`.
pub fn iemf_coefficient(s_unimodal: f64, s_multimodal: f64, cfg: &IemfConfig) -> f64 {
    if s_multimodal <= EPSILON_DIV {
        log::warn!("degenerate batch: fused score {s_multimodal:e} at or below guard, using xi = gamma");
        return cfg.gamma;
    }
    let ratio = s_unimodal / s_multimodal;
    let xi = cfg.gamma * cfg.gating.one_plus(1.0 - ratio);
    match ratio.partial_cmp(&1.0) {
        Some(std::cmp::Ordering::Greater) => xi.min(cfg.gamma.next_down()).max(f64::MIN_POSITIVE),
        Some(std::cmp::Ordering::Less) => xi.max(cfg.gamma.next_up()),
        _ => xi,
    }
}

/// Computes the scores and coefficient from one forward pass' probabilities.
pub fn strength_scores(
    p_a: &Tensor,
    p_v: &Tensor,
    p_av: &Tensor,
    labels: &[usize],
    cfg: &IemfConfig,
) -> Result<StrengthScores> {
    let c_a = per_sample_content(p_a, labels)?;
    let c_v = per_sample_content(p_v, labels)?;
    let c_av = per_sample_content(p_av, labels)?;
    let (s_unimodal, s_multimodal) = batch_strength_scores(&c_a, &c_v, &c_av)?;
    let xi = if cfg.enabled { iemf_coefficient(s_unimodal, s_multimodal, cfg) } else { 1.0 };
    Ok(StrengthScores { s_unimodal, s_multimodal, xi, batch_size: labels.len() })
}

/// Proposed new value of the fusion parameters:
/// `W ← W − η·ξ·(∇W + wd·W)`, biases without decay.
///
/// Returns `(id, new value)` pairs without touching the model so a failing
/// step can be discarded.
pub fn fusion_update(
    model: &MultimodalModel,
    grads: &GradientSet,
    eta: f64,
    xi: f64,
    weight_decay: f64,
) -> Result<Vec<(crate::tape::ParamId, Tensor)>> {
    let (w, b) = model.fusion_ids();
    [w, b]
        .into_iter()
        .map(|id| {
            let p = model.param(id);
            let g = grads.get(id).ok_or_else(|| Error::Contract(format!("missing gradient for {}", p.name)))?;
            g.check_finite(&p.name)?;
            let wd = if p.kind == ParamKind::Weight { weight_decay } else { 0.0 };
            let step = eta * xi;
            let next = p.value.zip_map(g, |x, gx| x - step * (gx + wd * x))?;
            next.check_finite(&p.name)?;
            Ok((id, next))
        })
        .collect()
}

/// Applies [`fusion_update`] in place.
pub fn modulated_fusion_update(
    model: &mut MultimodalModel,
    grads: &GradientSet,
    eta: f64,
    xi: f64,
    weight_decay: f64,
) -> Result<()> {
    for (id, value) in fusion_update(model, grads, eta, xi, weight_decay)? {
        model.set_param(id, value)?;
    }
    Ok(())
}
