//! Label-smoothed identification loss, cross-modality center triplet loss and
//! their weighted combination.

use mid_tensor::{Backward, BackwardCtx, Graph, InputGrads, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MidError, Result};

/// Term weights, triplet margin and label-smoothing strength.
///
/// `lambdas` are ordered: center triplet rgb/ir, rgb/mix, ir/mix, then
/// identification rgb, ir, mix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambdas: [f32; 6],
    pub margin: f32,
    pub smoothing: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambdas: [1.0, 0.5, 0.5, 1.0, 1.0, 0.1], margin: 0.3, smoothing: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(MidError::Config(format!("loss weights must be non-negative, got {:?}", self.lambdas)));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(MidError::Config(format!("margin {} must be non-negative", self.margin)));
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(MidError::Config(format!("smoothing {} outside [0, 1]", self.smoothing)));
        }
        Ok(())
    }

    /// Weights of the two-modality baseline: every term involving mixed
    /// images switched off.
    pub fn without_mix(&self) -> Self {
        let mut w = self.clone();
        w.lambdas[1] = 0.0;
        w.lambdas[2] = 0.0;
        w.lambdas[5] = 0.0;
        w
    }

    pub fn uses_mix(&self) -> bool {
        self.lambdas[1] != 0.0 || self.lambdas[2] != 0.0 || self.lambdas[5] != 0.0
    }
}

/// Target distribution: `1 − ξ(P−1)/P` on the label, `ξ/P` elsewhere.
fn targets(p: usize, label: usize, xi: f64) -> impl Iterator<Item = f64> {
    let off = xi / p as f64;
    let on = 1.0 - xi * (p as f64 - 1.0) / p as f64;
    (0..p).map(move |j| if j == label { on } else { off })
}

struct SmoothedCe {
    labels: Vec<usize>,
    xi: f64,
}

fn softmax_row(z: &[f32]) -> (Vec<f64>, f64) {
    let m = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    (e.iter().map(|v| v / s).collect(), m + s.ln())
}

impl Backward for SmoothedCe {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads, mid_tensor::TensorError> {
        let z = ctx.input(0);
        let (b, p) = (z.shape()[0], z.shape()[1]);
        let go = ctx.grad_output()[0] as f64 / b as f64;
        let mut dz = vec![0.0f32; b * p];
        for i in 0..b {
            let (sm, _) = softmax_row(&z.data()[i * p..(i + 1) * p]);
            for (j, q) in targets(p, self.labels[i], self.xi).enumerate() {
                dz[i * p + j] = ((sm[j] - q) * go) as f32;
            }
        }
        Ok(vec![Some(dz)])
    }
}

/// Batch mean of the label-smoothed cross-entropy of one classifier head.
pub fn smoothed_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], xi: f32) -> Result<Var> {
    let z = g.try_value(logits)?;
    let (b, p) = match *z.shape() {
        [b, p] => (b, p),
        _ => return Err(MidError::Config(format!("logits {:?} are not [B, P]", z.shape()))),
    };
    if p < 2 {
        return Err(MidError::Config("identification needs at least two classes".into()));
    }
    if labels.len() != b {
        return Err(MidError::Data(format!("{} labels for {b} logit rows", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= p) {
        return Err(MidError::Data(format!("label {l} out of range for {p} classes")));
    }
    let xi = xi as f64;
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &z.data()[i * p..(i + 1) * p];
        let (_, lse) = softmax_row(row);
        let dot: f64 = targets(p, label, xi).zip(row).map(|(q, &v)| q * v as f64).sum();
        total += lse - dot;
    }
    let out = Tensor::scalar((total / b as f64) as f32);
    Ok(g.record("smoothed_cross_entropy", &[logits], out, SmoothedCe { labels: labels.to_vec(), xi })?)
}

/// Identification loss averaged over all classifier heads.
pub fn id_loss(g: &mut Graph, heads: &[Var], labels: &[usize], xi: f32) -> Result<Var> {
    if heads.is_empty() {
        return Err(MidError::Config("no classifier heads".into()));
    }
    let mut acc = smoothed_cross_entropy(g, heads[0], labels, xi)?;
    for &h in &heads[1..] {
        let l = smoothed_cross_entropy(g, h, labels, xi)?;
        acc = g.add(acc, l)?;
    }
    Ok(g.scale(acc, 1.0 / heads.len() as f32)?)
}

struct GroupMean {
    groups: Vec<usize>,
    counts: Vec<usize>,
}

impl Backward for GroupMean {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads, mid_tensor::TensorError> {
        let x = ctx.input(0);
        let d = x.shape()[1];
        let go = ctx.grad_output();
        let mut dx = vec![0.0f32; x.numel()];
        for (n, &p) in self.groups.iter().enumerate() {
            let inv = 1.0 / self.counts[p] as f32;
            for k in 0..d {
                dx[n * d + k] = go[p * d + k] * inv;
            }
        }
        Ok(vec![Some(dx)])
    }
}

/// Per-identity feature centers. Returns `[P, D]` centers and the identity
/// of each row, in order of first appearance.
pub fn compute_centers(g: &mut Graph, features: Var, labels: &[usize]) -> Result<(Var, Vec<usize>)> {
    let x = g.try_value(features)?;
    let (n, d) = match *x.shape() {
        [n, d] => (n, d),
        _ => return Err(MidError::Config(format!("features {:?} are not [N, D]", x.shape()))),
    };
    if labels.len() != n {
        return Err(MidError::Data(format!("{} labels for {n} features", labels.len())));
    }
    if n == 0 {
        return Err(MidError::Data("no features to average".into()));
    }
    let mut ids: Vec<usize> = Vec::new();
    let groups: Vec<usize> = labels
        .iter()
        .map(|l| match ids.iter().position(|i| i == l) {
            Some(p) => p,
            None => {
                ids.push(*l);
                ids.len() - 1
            }
        })
        .collect();
    let mut counts = vec![0usize; ids.len()];
    let mut sums = vec![0f64; ids.len() * d];
    for (row, &p) in groups.iter().enumerate() {
        counts[p] += 1;
        for k in 0..d {
            sums[p * d + k] += x.data()[row * d + k] as f64;
        }
    }
    let data = sums.iter().enumerate().map(|(i, s)| (s / counts[i / d] as f64) as f32).collect();
    let out = Tensor::new(&[ids.len(), d], data)?;
    let v = g.record("group_mean", &[features], out, GroupMean { groups, counts })?;
    Ok((v, ids))
}

/// One hinge term of the center triplet loss: anchor, positive, hardest
/// negative (rows index the stacked `[α; β]` centers).
struct Term {
    anchor: usize,
    positive: usize,
    negative: usize,
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// Evaluates every hinge term; returns the loss and the active terms.
fn center_triplet_terms(ca: &Tensor, cb: &Tensor, margin: f64) -> (f64, Vec<Term>) {
    let (p, d) = (ca.shape()[0], ca.shape()[1]);
    let row = |i: usize| -> &[f32] {
        if i < p {
            &ca.data()[i * d..(i + 1) * d]
        } else {
            &cb.data()[(i - p) * d..(i - p + 1) * d]
        }
    };
    let mut loss = 0.0;
    let mut active = Vec::new();
    for side in 0..2 {
        for id in 0..p {
            let anchor = side * p + id;
            let positive = (1 - side) * p + id;
            let pos = dist(row(anchor), row(positive));
            let (negative, neg) = (0..2 * p)
                .filter(|&j| j % p != id)
                .map(|j| (j, dist(row(anchor), row(j))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least two identities");
            let h = margin + pos - neg;
            if h > 0.0 {
                loss += h;
                active.push(Term { anchor, positive, negative });
            }
        }
    }
    (loss, active)
}

struct CenterTriplet {
    margin: f64,
}

impl Backward for CenterTriplet {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<InputGrads, mid_tensor::TensorError> {
        let (ca, cb) = (ctx.input(0), ctx.input(1));
        let (p, d) = (ca.shape()[0], ca.shape()[1]);
        let go = ctx.grad_output()[0] as f64;
        let (_, active) = center_triplet_terms(ca, cb, self.margin);
        let stacked: Vec<f32> = ca.data().iter().chain(cb.data()).copied().collect();
        let row = |i: usize| &stacked[i * d..(i + 1) * d];
        let mut grad = vec![0f64; 2 * p * d];
        // d‖a − b‖/da = (a − b)/‖a − b‖, taken as zero at coincidence.
        let pull = |from: usize, to: usize, sign: f64, grad: &mut Vec<f64>| {
            let len = dist(row(from), row(to));
            if len == 0.0 {
                return;
            }
            for k in 0..d {
                let u = (row(from)[k] - row(to)[k]) as f64 / len * sign * go;
                grad[from * d + k] += u;
                grad[to * d + k] -= u;
            }
        };
        for t in &active {
            pull(t.anchor, t.positive, 1.0, &mut grad);
            pull(t.anchor, t.negative, -1.0, &mut grad);
        }
        let (ga, gb) = grad.split_at(p * d);
        Ok(vec![Some(ga.iter().map(|&v| v as f32).collect()), Some(gb.iter().map(|&v| v as f32).collect())])
    }
}

/// Cross-modality center triplet loss between two modalities' centers, rows
/// aligned by identity. For every center of either modality the positive is
/// the same identity's center in the other modality and the negative is the
/// closest other-identity center of either modality.
pub fn center_triplet(g: &mut Graph, c_alpha: Var, c_beta: Var, margin: f32) -> Result<Var> {
    let (ca, cb) = (g.try_value(c_alpha)?, g.try_value(c_beta)?);
    if ca.rank() != 2 || ca.shape() != cb.shape() {
        return Err(MidError::Config(format!("center sets {:?} and {:?} must both be [P, D]", ca.shape(), cb.shape())));
    }
    if ca.shape()[0] < 2 {
        return Err(MidError::Data("center triplet loss needs at least two identities".into()));
    }
    let (loss, _) = center_triplet_terms(ca, cb, margin as f64);
    let out = Tensor::scalar(loss as f32);
    Ok(g.record("center_triplet", &[c_alpha, c_beta], out, CenterTriplet { margin: margin as f64 })?)
}

/// Network outputs for one modality of a batch.
#[derive(Clone, Debug)]
pub struct ModalityOutputs {
    /// Retrieval features `[N, D]`.
    pub features: Var,
    /// One `[N, P]` logit tensor per classifier head.
    pub logits: Vec<Var>,
    pub labels: Vec<usize>,
}

/// The total loss and its six unweighted components.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    /// Same order as [`LossWeights::lambdas`]; skipped terms are zero.
    pub parts: [f32; 6],
}

pub const LOSS_PART_NAMES: [&str; 6] = ["ct_rgb_ir", "ct_rgb_mix", "ct_ir_mix", "id_rgb", "id_ir", "id_mix"];

/// Weighted sum of the three center triplet and three identification terms.
/// Terms with zero weight are not evaluated, so `mix` may be absent when all
/// mixed-modality weights are zero.
pub fn total_loss(
    g: &mut Graph,
    rgb: &ModalityOutputs,
    ir: &ModalityOutputs,
    mix: Option<&ModalityOutputs>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    if mix.is_none() && w.uses_mix() {
        return Err(MidError::Config("mixed-modality loss terms need mixed outputs".into()));
    }
    let mut centers = Vec::with_capacity(3);
    let mut id_order: Option<Vec<usize>> = None;
    for m in [Some(rgb), Some(ir), mix] {
        let Some(m) = m else {
            centers.push(None);
            continue;
        };
        let (c, ids) = compute_centers(g, m.features, &m.labels)?;
        match &id_order {
            None => id_order = Some(ids),
            Some(o) if *o != ids => {
                return Err(MidError::Data("modalities disagree on identity order".into()));
            }
            Some(_) => {}
        }
        centers.push(Some(c));
    }
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let outputs = [Some(rgb), Some(ir), mix];
    let mut terms: Vec<Var> = Vec::new();
    let mut parts = [0f32; 6];
    for (t, &(a, b)) in pairs.iter().enumerate() {
        if w.lambdas[t] == 0.0 {
            continue;
        }
        let (ca, cb) = (centers[a].expect("present"), centers[b].expect("present"));
        let l = center_triplet(g, ca, cb, w.margin)?;
        parts[t] = g.value(l).item()?;
        terms.push(g.scale(l, w.lambdas[t])?);
    }
    for (t, out) in outputs.iter().enumerate() {
        if w.lambdas[3 + t] == 0.0 {
            continue;
        }
        let out = out.expect("present");
        let l = id_loss(g, &out.logits, &out.labels, w.smoothing)?;
        parts[3 + t] = g.value(l).item()?;
        terms.push(g.scale(l, w.lambdas[3 + t])?);
    }
    let total = match terms.split_first() {
        None => {
            // Every weight is zero; keep the loss attached to the features.
            let f = g.scale(rgb.features, 0.0)?;
            g.sum(f)?
        }
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            acc
        }
    };
    Ok(LossBreakdown { total, parts })
}
