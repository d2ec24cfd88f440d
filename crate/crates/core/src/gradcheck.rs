//! Central finite-difference check of tape gradients.
//!
//! Only meaningful for continuous models: in spiking mode the tape carries
//! surrogate derivatives, which the forward pass does not have. With
//! detached probes the encoders descend `loss − loss_heads`, so that is the
//! function differentiated numerically for encoder entries.

use crate::error::Result;
use crate::model::{Batch, HeadMode, LossOptions, MultimodalModel, ParamGroup};
use crate::tensor::Tensor;

/// Denominator floor so that near-zero gradients are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares every parameter entry's tape gradient with `(L(θ+h) − L(θ−h)) / 2h`.
pub fn check_model_gradients(model: &MultimodalModel, batch: &Batch, opts: &LossOptions, h: f64) -> Result<GradCheck> {
    let (_, grads) = model.loss_and_grads(batch, opts)?;
    let mut report = GradCheck { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut probe = model.clone();
    for id in model.param_ids() {
        let p = model.param(id);
        let base = p.value.clone();
        let encoder = matches!(p.group, ParamGroup::AudioEncoder | ParamGroup::VisualEncoder);
        let skip_heads = encoder && model.config.head_mode == HeadMode::ProbeDetached;
        for i in 0..base.numel() {
            let mut shifted = |delta: f64| -> Result<f64> {
                let mut data = base.data().to_vec();
                data[i] += delta;
                probe.set_param(id, Tensor::new(base.shape().to_vec(), data)?)?;
                let out = probe.forward_with(batch, opts)?;
                Ok(if skip_heads { out.loss - out.loss_heads } else { out.loss })
            };
            let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((p.name.clone(), i));
            }
            report.checked += 1;
        }
        probe.set_param(id, base)?;
    }
    Ok(report)
}
