//! Shared fixtures and brute-force oracles for integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use iemf_core::model::{Distillation, HeadMode, LossOptions};
use iemf_core::neuron::LifParams;
use iemf_core::{Batch, ModelConfig, MultimodalModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

pub fn random_case(seed: u64) -> (MultimodalModel, Batch, LossOptions) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let cfg = ModelConfig {
        d_in_a: rng.random_range(1..6),
        d_in_v: rng.random_range(1..6),
        n_classes: rng.random_range(2..6),
        depth: rng.random_range(1..4),
        hidden: rng.random_range(2..7),
        latent: rng.random_range(2..6),
        head_mode: if rng.random_bool(0.5) { HeadMode::Joint } else { HeadMode::ProbeDetached },
        head_weight: rng.random_range(0.0..2.0),
        ..ModelConfig::default()
    };
    let model = MultimodalModel::new(cfg.clone(), seed).unwrap();
    let b = rng.random_range(2..7);
    let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..cfg.n_classes)).collect();
    let batch =
        Batch::new(random_tensor(&mut rng, b, cfg.d_in_a), random_tensor(&mut rng, b, cfg.d_in_v), y.clone()).unwrap();
    let mut opts = LossOptions::default();
    if seed % 3 == 1 {
        // every label stays inside the mask
        let mut mask = vec![false; cfg.n_classes];
        y.iter().for_each(|&c| mask[c] = true);
        mask[(y[0] + 1) % cfg.n_classes] = true;
        opts.class_mask = Some(mask);
    }
    if seed % 4 == 2 {
        let target = random_tensor(&mut rng, b, cfg.n_classes);
        let probs = iemf_core::tensor::softmax_rows(&target).unwrap();
        opts.distill = Some(Distillation {
            target: probs,
            mask: vec![true; cfg.n_classes],
            temperature: rng.random_range(0.5..3.0),
            weight: rng.random_range(0.1..2.0),
        });
    }
    (model, batch, opts)
}

/// Hand-unrolled BPTT for one LIF layer of two units driven by a constant
/// current `I = W x + b` for `T` steps, with loss `Σ_t c · s_t`.
pub fn lif_oracle(
    w: [[f64; 2]; 2],
    b: [f64; 2],
    x: [f64; 2],
    c: [f64; 2],
    p: &LifParams,
) -> ([[f64; 2]; 2], [f64; 2], f64) {
    let t_steps = p.steps;
    let tau = 1.0 - 1.0 / p.tau_m;
    let surrogate = |u: f64| (1.0 - (u - p.u_th).abs() / p.surrogate_width).max(0.0);
    let mut gw = [[0.0; 2]; 2];
    let mut gb = [0.0; 2];
    let mut loss = 0.0;
    for i in 0..2 {
        let current = w[i][0] * x[0] + w[i][1] * x[1] + b[i];
        let (mut pre, mut spikes) = (Vec::new(), Vec::new());
        let mut u = 0.0;
        for t in 0..t_steps {
            let v = if t == 0 { current } else { tau * u + current };
            let s = if v - p.u_th >= 0.0 { 1.0 } else { 0.0 };
            u = v * (1.0 - s);
            pre.push(v);
            spikes.push(s);
            loss += c[i] * s;
        }
        // dL/dv_t = c σ'(v_t) + τ (1 − s_t) dL/dv_{t+1}
        let mut g_next = 0.0;
        let mut g_current = 0.0;
        for t in (0..t_steps).rev() {
            let g = c[i] * surrogate(pre[t]) + tau * (1.0 - spikes[t]) * g_next;
            g_current += g;
            g_next = g;
        }
        gw[i] = [g_current * x[0], g_current * x[1]];
        gb[i] = g_current;
    }
    (gw, gb, loss)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, k: usize) -> Vec<Vec<f64>> {
    // quantised so ties and repeated values occur
    (1..=k).map(|len| (0..len).map(|_| rng.random_range(0..=20) as f64 / 20.0).collect()).collect()
}

pub fn oracle_aa_aia(a: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let mut aa = Vec::new();
    for row in a {
        let mut s = 0.0;
        for v in row {
            s += v;
        }
        aa.push(s / row.len() as f64);
    }
    let mut s = 0.0;
    for v in &aa {
        s += v;
    }
    let aia = s / aa.len() as f64;
    (aa, aia)
}

pub fn oracle_afr(a: &[Vec<f64>]) -> f64 {
    let k = a.len();
    let mut sum_f = 0.0;
    for step in 1..k {
        let mut f = 0.0;
        for task in 0..step {
            let mut best = a[task][task];
            for earlier in task..step {
                if a[earlier][task] > best {
                    best = a[earlier][task];
                }
            }
            f += best - a[step][task];
        }
        sum_f += f / step as f64;
    }
    sum_f / (k - 1) as f64
}

pub fn oracle_top1(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut correct = 0;
    for (row, &y) in logits.iter().zip(labels) {
        // first index attaining the maximum
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pred = row.iter().position(|&v| v == max).unwrap();
        if pred == y {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

pub struct OracleCost {
    pub upper: f64,
    pub lower: f64,
    pub thresholds: Vec<f64>,
    pub costs: Vec<Option<f64>>,
}

pub fn oracle_cost(curves: &[(Vec<f64>, f64)], levels: usize) -> Option<OracleCost> {
    let mut upper = f64::INFINITY;
    let mut lower = f64::NEG_INFINITY;
    for (errs, _) in curves {
        let mut hi = errs[0];
        let mut lo = errs[0];
        for &e in errs {
            hi = hi.max(e);
            lo = lo.min(e);
        }
        upper = upper.min(hi);
        lower = lower.max(lo);
    }
    if upper <= lower {
        return None;
    }
    let mut thresholds = Vec::new();
    for l in 0..levels {
        let frac = (levels - 1 - l) as f64 / (levels - 1) as f64;
        thresholds.push(lower + (upper - lower) * frac);
    }
    let mut costs = Vec::new();
    for (errs, omega) in curves {
        let mut total = 0usize;
        let mut ok = true;
        for &t in &thresholds {
            let mut found = None;
            for (i, &e) in errs.iter().enumerate() {
                if e <= t {
                    found = Some(i + 1);
                    break;
                }
            }
            match found {
                Some(ep) => total += ep,
                None => ok = false,
            }
        }
        costs.push(ok.then(|| total as f64 / levels as f64 * omega));
    }
    Some(OracleCost { upper, lower, thresholds, costs })
}
