//! Seeded two-modality Gaussian prototype datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub n_classes: usize,
    pub d_in_a: usize,
    pub d_in_v: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub sigma_a: f64,
    pub sigma_v: f64,
    pub drop_prob_a: f64,
    pub drop_prob_v: f64,
    pub prototype_scale: f64,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n_classes: 6,
            d_in_a: 32,
            d_in_v: 32,
            train_per_class: 200,
            test_per_class: 50,
            sigma_a: 1.5,
            sigma_v: 0.5,
            drop_prob_a: 0.0,
            drop_prob_v: 0.0,
            prototype_scale: 1.0,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.d_in_a == 0 || self.d_in_v == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("both splits need at least one sample per class".into()));
        }
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !nonneg(self.sigma_a) || !nonneg(self.sigma_v) || !nonneg(self.prototype_scale) {
            return Err(Error::Config("noise and prototype scales must be finite and non-negative".into()));
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.drop_prob_a) || !prob(self.drop_prob_v) {
            return Err(Error::Config("drop probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn sigma(&self, m: Modality) -> f64 {
        match m {
            Modality::Audio => self.sigma_a,
            Modality::Visual => self.sigma_v,
        }
    }

    fn drop_prob(&self, m: Modality) -> f64 {
        match m {
            Modality::Audio => self.drop_prob_a,
            Modality::Visual => self.drop_prob_v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    pub spec: DataSpec,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sample_split(
    spec: &DataSpec,
    protos_a: &[Vec<f64>],
    protos_v: &[Vec<f64>],
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let n = per_class * spec.n_classes;
    let mut xa = Vec::with_capacity(n * spec.d_in_a);
    let mut xv = Vec::with_capacity(n * spec.d_in_v);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.n_classes;
        for (m, protos, out) in [(Modality::Audio, protos_a, &mut xa), (Modality::Visual, protos_v, &mut xv)] {
            let sigma = spec.sigma(m);
            let mut x: Vec<f64> =
                protos[c].iter().map(|mu| mu + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            if rng.random::<f64>() < spec.drop_prob(m) {
                x.iter_mut().for_each(|v| *v = 0.0);
            }
            out.extend(x);
        }
        y.push(c);
    }
    Batch::new(Tensor::new(vec![n, spec.d_in_a], xa)?, Tensor::new(vec![n, spec.d_in_v], xv)?, y)
}

/// Draws class prototypes once, then samples `μ_y + σ·ε` per modality with
/// optional whole-modality dropout. Train and test use independent streams.
pub fn generate(spec: &DataSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos_a: Vec<Vec<f64>> =
        (0..spec.n_classes).map(|_| normal_vec(&mut proto_rng, spec.d_in_a, spec.prototype_scale)).collect();
    let protos_v: Vec<Vec<f64>> =
        (0..spec.n_classes).map(|_| normal_vec(&mut proto_rng, spec.d_in_v, spec.prototype_scale)).collect();

    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    test_rng.set_stream(2);
    let train = sample_split(spec, &protos_a, &protos_v, spec.train_per_class, &mut train_rng)?;
    let test = sample_split(spec, &protos_a, &protos_v, spec.test_per_class, &mut test_rng)?;
    Ok(Dataset { train, test, spec: spec.clone() })
}

fn add_noise(x: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let data = x.data().iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Adds extra seeded Gaussian noise to one modality of both splits.
pub fn corrupt(dataset: &Dataset, modality: Modality, extra_sigma: f64, seed: u64) -> Result<Dataset> {
    if !(extra_sigma >= 0.0 && extra_sigma.is_finite()) {
        return Err(Error::Config(format!("extra_sigma must be non-negative, got {extra_sigma}")));
    }
    if extra_sigma == 0.0 {
        return Ok(dataset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for split in [&mut out.train, &mut out.test] {
        match modality {
            Modality::Audio => split.x_a = add_noise(&split.x_a, extra_sigma, &mut rng)?,
            Modality::Visual => split.x_v = add_noise(&split.x_v, extra_sigma, &mut rng)?,
        }
    }
    Ok(out)
}
