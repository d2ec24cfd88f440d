//! Two-dimensional loss slices around a trained point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::Objective;
use crate::error::{Error, Result};
use crate::parallel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub coords: Vec<f64>,
    /// `loss[iy][ix]` at `w + coords[ix]·d1 + coords[iy]·d2`.
    pub loss: Vec<Vec<f64>>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl LandscapeGrid {
    /// `(x, y, loss)` triples in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.loss.iter().enumerate().flat_map(move |(iy, row)| {
            row.iter().enumerate().map(move |(ix, &l)| (self.coords[ix], self.coords[iy], l))
        })
    }
}

/// Gaussian direction rescaled block by block to the norm of the matching
/// parameter block.
pub fn normalized_direction(obj: &dyn Objective, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w = obj.point();
    let mut d: Vec<f64> = (0..w.len()).map(|_| StandardNormal.sample(rng)).collect();
    for block in obj.blocks() {
        let wn = w[block.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
        let dn = d[block.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = if dn > 0.0 { wn / dn } else { 0.0 };
        d[block].iter_mut().for_each(|x| *x *= s);
    }
    d
}

/// Evenly spaced coordinates in `[-extent, extent]` with an exact zero centre.
pub fn grid_coords(grid_n: usize, extent: f64) -> Vec<f64> {
    let half = (grid_n - 1) as f64;
    (0..grid_n).map(|i| extent * (2.0 * i as f64 - half) / half).collect()
}

pub fn landscape_slice(
    obj: &dyn Objective,
    grid_n: usize,
    extent: f64,
    seed: u64,
    threads: usize,
) -> Result<LandscapeGrid> {
    if grid_n < 3 || grid_n.is_multiple_of(2) {
        return Err(Error::Config(format!("grid_n must be odd and at least 3, got {grid_n}")));
    }
    if !(extent >= 0.0 && extent.is_finite()) {
        return Err(Error::Config("extent must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = normalized_direction(obj, &mut rng);
    let d2 = normalized_direction(obj, &mut rng);
    let w = obj.point();
    let coords = grid_coords(grid_n, extent);
    let flat = parallel::map_indexed(grid_n * grid_n, threads, |cell| {
        let (x, y) = (coords[cell % grid_n], coords[cell / grid_n]);
        let p: Vec<f64> = w.iter().zip(&d1).zip(&d2).map(|((wi, a), b)| wi + x * a + y * b).collect();
        obj.loss(&p)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let loss = flat.chunks(grid_n).map(<[f64]>::to_vec).collect();
    Ok(LandscapeGrid { coords, loss, d1, d2 })
}
