use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::objective::Objective;
use crate::error::{Error, Result};
use crate::parallel;

/// Largest parameter count handled by the dense path.
pub const MAX_DENSE_PARAMS: usize = 2000;
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianSpectrum {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// `‖H − Hᵀ‖_F / ‖H‖_F` of the raw finite-difference matrix.
    pub asymmetry: f64,
}

/// Dense Hessian by central differences of the gradient, symmetrised, then
/// a symmetric eigendecomposition.
pub fn hessian_eigens(obj: &dyn Objective, threads: usize) -> Result<HessianSpectrum> {
    let w = obj.point();
    let d = w.len();
    if d > MAX_DENSE_PARAMS {
        return Err(Error::Unsupported(format!("{d} parameters exceed the dense Hessian limit of {MAX_DENSE_PARAMS}")));
    }
    let columns = parallel::map_indexed(d, threads, |j| -> Result<Vec<f64>> {
        let mut plus = w.clone();
        let mut minus = w.clone();
        plus[j] += FD_STEP;
        minus[j] -= FD_STEP;
        let (gp, gm) = (obj.grad(&plus)?, obj.grad(&minus)?);
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * FD_STEP)).collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let raw = DMatrix::from_fn(d, d, |i, j| columns[j][i]);
    let total = raw.norm();
    let asymmetry = if total > 0.0 { (&raw - raw.transpose()).norm() / total } else { 0.0 };
    let sym = (&raw + raw.transpose()) * 0.5;
    let mut eigenvalues: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    Ok(HessianSpectrum { eigenvalues, asymmetry })
}
