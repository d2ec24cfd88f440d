use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{Batch, LossOptions, MultimodalModel, ParamGroup};
use crate::tape::ParamId;
use crate::tensor::Tensor;

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective: Sync {
    /// Current parameter vector (the point being analysed).
    fn point(&self) -> Vec<f64>;
    fn loss(&self, x: &[f64]) -> Result<f64>;
    fn grad(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Contiguous parameter blocks used for direction normalisation.
    fn blocks(&self) -> Vec<Range<usize>> {
        std::iter::once(0..self.point().len()).collect()
    }
}

/// `½ Σ_ij (x−c)_i H_ij (x−c)_j`, with `point` as the evaluation centre.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub hessian: Vec<f64>,
    pub center: Vec<f64>,
    pub at: Vec<f64>,
    pub block_sizes: Vec<usize>,
}

impl Quadratic {
    pub fn diagonal(eigenvalues: &[f64], at: Vec<f64>) -> Self {
        let d = eigenvalues.len();
        let mut hessian = vec![0.0; d * d];
        for (i, &l) in eigenvalues.iter().enumerate() {
            hessian[i * d + i] = l;
        }
        Self { hessian, center: vec![0.0; d], at, block_sizes: vec![d] }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Multiplies the whole function by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { hessian: self.hessian.iter().map(|h| h * c).collect(), ..self.clone() }
    }
}

impl Objective for Quadratic {
    fn point(&self) -> Vec<f64> {
        self.at.clone()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        let g = self.grad(x)?;
        Ok(0.5 * x.iter().zip(&self.center).zip(&g).map(|((xi, ci), gi)| (xi - ci) * gi).sum::<f64>())
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::Shape(format!("point of length {} for a {d}-dimensional quadratic", x.len())));
        }
        let dev: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        Ok((0..d).map(|i| (0..d).map(|j| self.hessian[i * d + j] * dev[j]).sum()).collect())
    }

    fn blocks(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.block_sizes
            .iter()
            .map(|&n| {
                start += n;
                start - n..start
            })
            .collect()
    }
}

/// Which parameters of a model the analysis perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    /// Fusion weights and bias only.
    #[default]
    Fusion,
    All,
}

/// Total training loss of a model on a fixed batch, as a function of the
/// parameters in `scope`.
pub struct ModelObjective {
    model: MultimodalModel,
    batch: Batch,
    ids: Vec<ParamId>,
    opts: LossOptions,
}

impl ModelObjective {
    pub fn new(model: &MultimodalModel, batch: &Batch, scope: ParamScope) -> Self {
        let ids = match scope {
            ParamScope::Fusion => model.ids_in(ParamGroup::Fusion),
            ParamScope::All => model.param_ids().collect(),
        };
        Self { model: model.clone(), batch: batch.clone(), ids, opts: LossOptions::default() }
    }

    pub fn dim(&self) -> usize {
        self.ids.iter().map(|&id| self.model.param(id).value.numel()).sum()
    }

    fn with_params(&self, x: &[f64]) -> Result<MultimodalModel> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.dim(), x.len())));
        }
        let mut m = self.model.clone();
        let mut off = 0;
        for &id in &self.ids {
            let shape = m.param(id).value.shape().to_vec();
            let n: usize = shape.iter().product();
            m.set_param(id, Tensor::new(shape, x[off..off + n].to_vec())?)?;
            off += n;
        }
        Ok(m)
    }

    /// Model with the scoped parameters replaced by `x`.
    pub fn model_at(&self, x: &[f64]) -> Result<MultimodalModel> {
        self.with_params(x)
    }
}

impl Objective for ModelObjective {
    fn point(&self) -> Vec<f64> {
        self.ids.iter().flat_map(|&id| self.model.param(id).value.data().to_vec()).collect()
    }

    fn loss(&self, x: &[f64]) -> Result<f64> {
        Ok(self.with_params(x)?.forward_with(&self.batch, &self.opts)?.loss)
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, grads) = self.with_params(x)?.loss_and_grads(&self.batch, &self.opts)?;
        let mut out = Vec::with_capacity(x.len());
        for &id in &self.ids {
            match grads.get(id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, self.model.param(id).value.numel())),
            }
        }
        Ok(out)
    }

    /// One block per layer (weight and bias together).
    fn blocks(&self) -> Vec<Range<usize>> {
        let mut blocks: Vec<Range<usize>> = Vec::new();
        let mut off = 0;
        let mut prev_name: Option<String> = None;
        for &id in &self.ids {
            let p = self.model.param(id);
            let n = p.value.numel();
            let layer = p.name.rsplit_once('.').map_or(p.name.clone(), |(l, _)| l.to_string());
            match (&prev_name, blocks.last_mut()) {
                (Some(prev), Some(last)) if *prev == layer => last.end += n,
                _ => blocks.push(off..off + n),
            }
            prev_name = Some(layer);
            off += n;
        }
        blocks
    }
}
