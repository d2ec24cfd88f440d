//! Training cost to reach shared error levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One method's per-epoch test error and its per-epoch training FLOPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub name: String,
    pub errors: Vec<f64>,
    pub flops_per_epoch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCost {
    pub name: String,
    /// First (1-based) epoch reaching each threshold; `None` if never reached.
    pub epochs: Vec<Option<usize>>,
    /// `mean(epochs) · flops_per_epoch`, absent when a threshold is missed.
    pub cost: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub upper: f64,
    pub lower: f64,
    /// Descending, from `upper` to `lower` inclusive.
    pub thresholds: Vec<f64>,
    pub methods: Vec<MethodCost>,
}

pub const DEFAULT_LEVELS: usize = 5;

/// Thresholds run from the lowest of the curves' worst errors down to the
/// highest of their best errors, so every method reaches every level.
pub fn computational_cost(curves: &[CostCurve], levels: usize) -> Result<CostReport> {
    if curves.len() < 2 || curves.iter().any(|c| c.errors.is_empty()) {
        return Err(Error::Config("need at least two methods, each with a non-empty error curve".into()));
    }
    if levels < 2 {
        return Err(Error::Config("need at least two threshold levels".into()));
    }
    if curves.iter().any(|c| c.errors.iter().any(|e| !e.is_finite()) || !(c.flops_per_epoch >= 0.0)) {
        return Err(Error::Numeric("error curves and FLOP counts must be finite".into()));
    }
    let max_of = |c: &CostCurve| c.errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_of = |c: &CostCurve| c.errors.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = curves.iter().map(max_of).fold(f64::INFINITY, f64::min);
    let lower = curves.iter().map(min_of).fold(f64::NEG_INFINITY, f64::max);
    if !(upper > lower) {
        return Err(Error::Contract(format!("degenerate error range: upper {upper} is not above lower {lower}")));
    }
    let last = (levels - 1) as f64;
    let thresholds: Vec<f64> = (0..levels).map(|l| lower + (upper - lower) * (last - l as f64) / last).collect();
    let methods = curves
        .iter()
        .map(|c| {
            let epochs: Vec<Option<usize>> =
                thresholds.iter().map(|&t| c.errors.iter().position(|&e| e <= t).map(|i| i + 1)).collect();
            let cost = epochs
                .iter()
                .copied()
                .collect::<Option<Vec<_>>>()
                .map(|e| e.iter().sum::<usize>() as f64 / e.len() as f64 * c.flops_per_epoch);
            MethodCost { name: c.name.clone(), epochs, cost }
        })
        .collect();
    Ok(CostReport { upper, lower, thresholds, methods })
}
