//! Loss-geometry analyses: contraction on quadratics, sharpness, loss
//! slices, Hessian spectra and cost-to-accuracy.

pub mod contraction;
pub mod cost;
pub mod hessian;
pub mod landscape;
pub mod objective;
pub mod sharpness;

pub use contraction::{step_case, verify_contraction, ContractionReport, QuadraticProblem, StepCase};
pub use cost::{computational_cost, CostCurve, CostReport, MethodCost};
pub use hessian::{hessian_eigens, HessianSpectrum};
pub use landscape::{grid_coords, landscape_slice, normalized_direction, LandscapeGrid};
pub use objective::{ModelObjective, Objective, ParamScope, Quadratic};
pub use sharpness::{sharpness, SharpnessReport};
