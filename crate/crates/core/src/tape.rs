//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Operations are appended in execution order, so the node list is already
//! topologically sorted and `backward` only needs a single reverse sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron;
use crate::tensor::{masked_softmax, Tensor};

/// Stable identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Spike { input: Var, threshold: f64, width: f64 },
    Detach(Var),
    ConcatCols(Var, Var),
    Sum(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, mask: Option<Vec<bool>> },
    SoftTargetKl { logits: Var, target: Tensor, mask: Option<Vec<bool>>, temperature: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            MatMul(a, b) | AddRow(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | ConcatCols(a, b) => {
                vec![*a, *b]
            }
            Transpose(a) | Scale(a, _) | AddScalar(a, _) | Relu(a) | Detach(a) | Sum(a) => vec![*a],
            Spike { input, .. } => vec![*input],
            SoftmaxCrossEntropy { logits, .. } | SoftTargetKl { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Cached auxiliary forward result (probabilities for the loss kernels).
    aux: Option<Tensor>,
}

/// Recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (id, g) in &self.grads {
            g.check_finite(&format!("gradient of parameter {}", id.0))?;
        }
        Ok(())
    }
}

fn cross_entropy_forward(logits: &Tensor, labels: &[usize], mask: Option<&[bool]>) -> Result<(Tensor, Tensor)> {
    let (b, m) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(mask) = mask {
        if mask.len() != m {
            return Err(Error::Shape(format!("class mask of {} for {m} classes", mask.len())));
        }
    }
    let mut probs = Vec::with_capacity(b * m);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= m || mask.is_some_and(|mk| !mk[y]) {
            return Err(Error::Index(format!("label {y} outside the {m} active classes")));
        }
        let row = logits.row(i);
        let p = masked_softmax(row, mask);
        // log-sum-exp form keeps -ln p finite for very confident rows
        let max = row
            .iter()
            .enumerate()
            .filter(|(c, _)| mask.is_none_or(|mk| mk[*c]))
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row
            .iter()
            .enumerate()
            .filter(|(c, _)| mask.is_none_or(|mk| mk[*c]))
            .map(|(_, &x)| (x - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        loss += lse - row[y];
        probs.extend(p);
    }
    Ok((Tensor::scalar(loss / b as f64), Tensor::from_parts(vec![b, m], probs)))
}

fn soft_target_forward(
    logits: &Tensor,
    target: &Tensor,
    mask: Option<&[bool]>,
    temperature: f64,
) -> Result<(Tensor, Tensor)> {
    logits.require_same_shape(target)?;
    let (b, m) = logits.dims2()?;
    let mut probs = Vec::with_capacity(b * m);
    let mut total = 0.0;
    for i in 0..b {
        let scaled: Vec<f64> = logits.row(i).iter().map(|z| z / temperature).collect();
        let p = masked_softmax(&scaled, mask);
        for (c, (&q, &pc)) in target.row(i).iter().zip(&p).enumerate() {
            if mask.is_some_and(|mk| !mk[c]) || q <= 0.0 {
                continue;
            }
            total += q * (q.ln() - pc.ln());
        }
        probs.extend(p);
    }
    let value = temperature * temperature * total / b as f64;
    Ok((Tensor::scalar(value), Tensor::from_parts(vec![b, m], probs)))
}

fn eval(op: &Op, nodes: &[Node]) -> Result<(Tensor, Option<Tensor>)> {
    let v = |x: &Var| &nodes[x.0].value;
    let out = match op {
        Op::Leaf | Op::Param(_) => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => v(a).matmul(v(b))?,
        Op::Transpose(a) => v(a).transpose()?,
        Op::AddRow(a, b) => v(a).add_row(v(b))?,
        Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y)?,
        Op::Sub(a, b) => v(a).zip_map(v(b), |x, y| x - y)?,
        Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y)?,
        Op::Scale(a, s) => v(a).map(|x| x * s),
        Op::AddScalar(a, s) => v(a).map(|x| x + s),
        Op::Relu(a) => v(a).map(|x| x.max(0.0)),
        Op::Spike { input, threshold, .. } => v(input).map(|x| neuron::heaviside(x - threshold)),
        Op::Detach(a) => v(a).clone(),
        Op::ConcatCols(a, b) => v(a).concat_cols(v(b))?,
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::SoftmaxCrossEntropy { logits, labels, mask } => {
            let (loss, probs) = cross_entropy_forward(v(logits), labels, mask.as_deref())?;
            return Ok((loss, Some(probs)));
        }
        Op::SoftTargetKl { logits, target, mask, temperature } => {
            let (loss, probs) = soft_target_forward(v(logits), target, mask.as_deref(), *temperature)?;
            return Ok((loss, Some(probs)));
        }
    };
    Ok((out, None))
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Cached probabilities of a loss node, if `v` is one.
    pub fn probs(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].aux.as_ref()
    }

    fn push_leaf(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value, aux: None });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, aux) = eval(&op, &self.nodes)?;
        value.check_finite("tape")?;
        self.nodes.push(Node { op, value, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(Op::Leaf, value)
    }

    /// Trainable parameter leaf; receives an entry in the gradient set.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push_leaf(Op::Param(id), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::AddScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Relu(a))
    }

    /// Heaviside spike `H(x - threshold)` whose backward uses the
    /// piecewise-linear surrogate of half-width `width`.
    pub fn spike(&mut self, input: Var, threshold: f64, width: f64) -> Result<Var> {
        self.record(Op::Spike { input, threshold, width })
    }

    /// Identity forward, zero gradient backward.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Detach(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::ConcatCols(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }

    /// `x · wᵀ + b` for `x: B×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        let xw = self.matmul(x, wt)?;
        self.add_row(xw, b)
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    ///
    /// With a mask, inactive classes are excluded from the normalisation.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        self.record(Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), mask: mask.map(<[bool]>::to_vec) })
    }

    /// `T² · mean_i KL(target_i ‖ softmax(logits_i / T))` over masked classes.
    pub fn soft_target_kl(
        &mut self,
        logits: Var,
        target: Tensor,
        mask: Option<&[bool]>,
        temperature: f64,
    ) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        self.record(Op::SoftTargetKl { logits, target, mask: mask.map(<[bool]>::to_vec), temperature })
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut fresh: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (value, aux) = match node.op {
                Op::Leaf | Op::Param(_) => (node.value.clone(), None),
                _ => eval(&node.op, &fresh)?,
            };
            fresh.push(Node { op: node.op.clone(), value, aux });
        }
        Ok(fresh.into_iter().map(|n| n.value).collect())
    }

    /// Gradients of the scalar node `seed` with respect to every parameter leaf.
    pub fn backward(&self, seed: Var) -> Result<GradientSet> {
        if seed.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("seed node {} is not on the tape", seed.0)));
        }
        if !self.nodes[seed.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.nodes[seed.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; seed.0 + 1];
        adj[seed.0] = Some(vec![1.0]);
        let mut grads = GradientSet::new();

        for idx in (0..=seed.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                    match grads.grads.get_mut(id) {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, d)| *a += d),
                        None => grads.insert(*id, t),
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(a).dims2()?;
                    let n = val(b).shape()[1];
                    let (ad, bd) = (val(a).data(), val(b).data());
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += a_ip * g[i * n + j];
                            }
                        }
                    }
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::Transpose(a) => {
                    let (r, c) = val(a).dims2()?;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(&mut adj[a.0], da);
                }
                Op::AddRow(a, b) => {
                    let n = val(b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    accumulate(&mut adj[a.0], g);
                    accumulate(&mut adj[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[b.0], g.iter().map(|x| -x).collect());
                    accumulate(&mut adj[a.0], g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::Scale(a, s) => accumulate(&mut adj[a.0], g.iter().map(|x| x * s).collect()),
                Op::AddScalar(a, _) => accumulate(&mut adj[a.0], g),
                Op::Relu(a) => {
                    let da = g.iter().zip(val(a).data()).map(|(x, &u)| if u > 0.0 { *x } else { 0.0 }).collect();
                    accumulate(&mut adj[a.0], da);
                }
                Op::Spike { input, threshold, width } => {
                    let da = g
                        .iter()
                        .zip(val(input).data())
                        .map(|(x, &u)| x * neuron::surrogate(u, *threshold, *width))
                        .collect();
                    accumulate(&mut adj[input.0], da);
                }
                Op::Detach(_) => {}
                Op::ConcatCols(a, b) => {
                    let (m, ca) = val(a).dims2()?;
                    let cb = val(b).shape()[1];
                    let mut da = Vec::with_capacity(m * ca);
                    let mut db = Vec::with_capacity(m * cb);
                    for row in g.chunks(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::Sum(a) => accumulate(&mut adj[a.0], vec![g[0]; val(a).numel()]),
                Op::SoftmaxCrossEntropy { logits, labels, .. } => {
                    let probs = node.aux.as_ref().expect("loss node caches probabilities");
                    let (b, m) = probs.dims2()?;
                    let scale = g[0] / b as f64;
                    let mut dz: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        dz[i * m + y] -= scale;
                    }
                    accumulate(&mut adj[logits.0], dz);
                }
                Op::SoftTargetKl { logits, target, mask, temperature } => {
                    let probs = node.aux.as_ref().expect("loss node caches probabilities");
                    let (b, m) = probs.dims2()?;
                    let scale = g[0] * temperature / b as f64;
                    let dz = probs
                        .data()
                        .iter()
                        .zip(target.data())
                        .enumerate()
                        .map(
                            |(flat, (p, q))| {
                                if mask.as_ref().is_some_and(|mk| !mk[flat % m]) {
                                    0.0
                                } else {
                                    scale * (p - q)
                                }
                            },
                        )
                        .collect();
                    accumulate(&mut adj[logits.0], dz);
                }
            }
            debug_assert!(node.op.inputs().iter().all(|i| i.0 < idx));
        }
        grads.check_finite()?;
        Ok(grads)
    }
}
