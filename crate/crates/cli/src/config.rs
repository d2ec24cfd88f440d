use std::path::{Path, PathBuf};

use iemf_core::analysis::{ParamScope, QuadraticProblem};
use iemf_core::continual::ContinualConfig;
use iemf_core::data::DataSpec;
use iemf_core::{Error, IemfConfig, ModelConfig, OptimConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Parameters perturbed by sharpness, landscape and Hessian analyses.
    pub scope: ParamScope,
    /// Training rows (taken from the front of the split) used as the loss batch.
    pub batch_rows: usize,
    pub radius: f64,
    pub probes: usize,
    pub ascent_steps: usize,
    /// Also report the Hessian spectrum alongside sharpness.
    pub hessian: bool,
    pub grid_n: usize,
    pub extent: f64,
    pub contraction: QuadraticProblem,
    pub contraction_steps: usize,
    pub cost_levels: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            scope: ParamScope::Fusion,
            batch_rows: 512,
            radius: 0.05,
            probes: 8,
            ascent_steps: 20,
            hessian: false,
            grid_n: 21,
            extent: 1.0,
            contraction: QuadraticProblem::default(),
            contraction_steps: 100,
            cost_levels: 5,
            seed: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rows == 0 || self.probes == 0 {
            return Err(Error::Config("analysis.batch_rows and analysis.probes must be positive".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config("analysis.radius must be positive".into()));
        }
        if self.grid_n < 3 || self.grid_n.is_multiple_of(2) || !(self.extent >= 0.0 && self.extent.is_finite()) {
            return Err(Error::Config("analysis.grid_n must be odd ≥ 3 and extent non-negative".into()));
        }
        if self.cost_levels < 2 {
            return Err(Error::Config("analysis.cost_levels must be at least 2".into()));
        }
        self.contraction.validate()
    }
}

/// Everything a command needs. The top-level `seed` drives data generation,
/// initialisation, shuffling and analysis probes; the top-level `iemf`
/// section is the one training uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub iemf: IemfConfig,
    pub continual: ContinualConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("iemf-out"),
            data: DataSpec::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            iemf: IemfConfig::default(),
            continual: ContinualConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("config {}: {e}", p.display()))))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", p.display())))
            }
        }
    }

    /// Applies the seed override, propagates shared settings into each
    /// section and validates everything.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.data.seed = self.seed;
        self.optim.seed = self.seed;
        self.analysis.seed = self.seed;
        self.optim.iemf = self.iemf.clone();
        self.model.d_in_a = self.data.d_in_a;
        self.model.d_in_v = self.data.d_in_v;
        self.model.n_classes = self.data.n_classes;
        self.data.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        self.iemf.validate()?;
        self.continual.validate()?;
        self.analysis.validate()?;
        Ok(self)
    }

    /// Matches the model's widths to a dataset that came from a file.
    pub fn adopt_data_spec(&mut self, spec: &DataSpec) -> Result<()> {
        self.model.d_in_a = spec.d_in_a;
        self.model.d_in_v = spec.d_in_v;
        self.model.n_classes = spec.n_classes;
        self.model.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map(|s| s + "\n").map_err(|e| Error::Format(e.to_string()))
    }
}
