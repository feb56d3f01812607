//! Modality-adaptive mixup: region-wise mixing of RGB/IR pairs with ratios
//! chosen by a one-step actor-critic agent.

use std::ops::Range;
use std::str::FromStr;

use mid_tensor::{stripe_bounds, Graph, NormMode, Optimizer, OptimizerKind, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MidError, Result};
use crate::metrics::{cosine_similarity_matrix, eval_score, SimilarityMatrix};
use crate::nn::{BatchNorm, Conv2d, Linear};

/// How mixed images are produced.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixupScheme {
    /// Ratios from the actor, learned from the retrieval reward.
    Mam,
    /// Every ratio fixed at 0.5.
    Fix,
    /// One Beta(a, a) draw per image, shared by all regions.
    Beta,
    /// No mixed modality at all.
    None,
}

impl MixupScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            MixupScheme::Mam => "mam",
            MixupScheme::Fix => "fix",
            MixupScheme::Beta => "beta",
            MixupScheme::None => "none",
        }
    }
}

impl FromStr for MixupScheme {
    type Err = MidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mam" => Ok(MixupScheme::Mam),
            "fix" => Ok(MixupScheme::Fix),
            "beta" => Ok(MixupScheme::Beta),
            "none" => Ok(MixupScheme::None),
            other => Err(MidError::Config(format!("unknown mixup scheme `{other}`"))),
        }
    }
}

/// Per-image, per-region mixup ratios `[B, G]`, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixRatioVector {
    values: Tensor,
}

impl MixRatioVector {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(MidError::Config(format!("mix ratios {:?} are not [B, G]", values.shape())));
        }
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MidError::Config(format!("mix ratio {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn constant(batch: usize, regions: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::full(&[batch, regions], value))
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn regions(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, image: usize, region: usize) -> f32 {
        self.values.data()[image * self.regions() + region]
    }

    pub fn mean(&self) -> f32 {
        (self.values.data().iter().map(|&v| v as f64).sum::<f64>() / self.values.numel() as f64) as f32
    }
}

/// Row ranges of `regions` horizontal stripes of a `[B, C, H, W]` batch.
pub fn partition_regions(x: &Tensor, regions: usize) -> Result<Vec<Range<usize>>> {
    let [_, _, h, _] = x.shape() else {
        return Err(MidError::Config(format!("images {:?} are not [B, C, H, W]", x.shape())));
    };
    Ok(stripe_bounds(*h, regions)?)
}

/// Region `g` of image `i` becomes `m[i,g]·rgb + (1 − m[i,g])·ir`.
pub fn mix_pair(x_rgb: &Tensor, x_ir: &Tensor, m: &MixRatioVector) -> Result<Tensor> {
    if x_rgb.shape() != x_ir.shape() {
        return Err(MidError::Config(format!("cannot mix {:?} with {:?}", x_rgb.shape(), x_ir.shape())));
    }
    let stripes = partition_regions(x_rgb, m.regions())?;
    let [b, c, h, w] = *x_rgb.shape() else { unreachable!("checked by partition_regions") };
    if m.batch() != b {
        return Err(MidError::Config(format!("{} ratio rows for {b} images", m.batch())));
    }
    let mut out = vec![0.0f32; x_rgb.numel()];
    for i in 0..b {
        for ch in 0..c {
            for (g, rows) in stripes.iter().enumerate() {
                let r = m.get(i, g);
                let span = ((i * c + ch) * h + rows.start) * w..((i * c + ch) * h + rows.end) * w;
                for ((o, &a), &v) in
                    out[span.clone()].iter_mut().zip(&x_rgb.data()[span.clone()]).zip(&x_ir.data()[span])
                {
                    *o = r * a + (1.0 - r) * v;
                }
            }
        }
    }
    Ok(Tensor::new(x_rgb.shape(), out)?)
}

/// Beta(a, a) ratio per image, shared by all of its regions.
pub fn beta_ratios<R: Rng + ?Sized>(batch: usize, regions: usize, a: f32, rng: &mut R) -> Result<MixRatioVector> {
    let dist = Beta::new(a, a).map_err(|e| MidError::Config(format!("beta mixup parameter {a}: {e}")))?;
    let mut v = Vec::with_capacity(batch * regions);
    for _ in 0..batch {
        let r: f32 = dist.sample(rng);
        v.extend(std::iter::repeat_n(r, regions));
    }
    MixRatioVector::new(Tensor::new(&[batch, regions], v)?)
}

/// Detached state maps of a batch of pairs.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub rgb: Tensor,
    pub ir: Tensor,
}

impl AgentState {
    fn check(&self) -> Result<(usize, usize)> {
        match (self.rgb.shape(), self.ir.shape()) {
            ([b, c, _, _], s) if s == self.rgb.shape() => Ok((*b, *c)),
            (a, b) => Err(MidError::Config(format!("state maps {a:?} and {b:?} do not pair up"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub trunk_channels: usize,
    pub hidden: usize,
    /// Standard deviation of the exploration noise on executed actions.
    pub noise_std: f32,
    pub lr: f32,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { trunk_channels: 32, hidden: 32, noise_std: 0.05, lr: 1e-3 }
    }
}

/// Shared trunk: conv over `[F_rgb; F_ir]`, batch norm, ReLU, global pooling.
#[derive(Clone, Debug)]
struct Trunk {
    conv: Conv2d,
    bn: BatchNorm,
}

impl Trunk {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        c_state: usize,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{prefix}.conv"), 2 * c_state, c, 3, 1, 1, rng)?,
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), c)?,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        state: &AgentState,
        mode: NormMode,
        trainable: bool,
    ) -> Result<Var> {
        state.check()?;
        let rgb = g.constant(state.rgb.clone());
        let ir = g.constant(state.ir.clone());
        let x = g.concat(&[rgb, ir], 1)?;
        let h = self.conv.forward(g, store, x, trainable)?;
        let h = self.bn.forward(g, store, h, mode, trainable)?;
        let h = g.relu(h)?;
        Ok(g.global_avg_pool(h)?)
    }
}

/// Policy network producing mixup ratios in `(0, 1)`.
pub struct Actor {
    pub store: ParamStore,
    trunk: Trunk,
    pub fc0: Linear,
    pub fc1: Linear,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(cfg: &AgentConfig, c_state: usize, regions: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let trunk = Trunk::new(&mut store, "agent.actor", c_state, cfg.trunk_channels, rng)?;
        let fc0 = Linear::new(&mut store, "agent.actor.fc0", cfg.trunk_channels, cfg.hidden, rng)?;
        let fc1 = Linear::new(&mut store, "agent.actor.fc1", cfg.hidden, regions, rng)?;
        Ok(Self { store, trunk, fc0, fc1 })
    }

    pub fn forward(&mut self, g: &mut Graph, state: &AgentState, mode: NormMode, trainable: bool) -> Result<Var> {
        let h = self.trunk.forward(g, &mut self.store, state, mode, trainable)?;
        let h = self.fc0.forward(g, &self.store, h, trainable)?;
        let h = g.relu(h)?;
        let h = self.fc1.forward(g, &self.store, h, trainable)?;
        Ok(g.sigmoid(h)?)
    }
}

/// A differentiable estimate of the expected reward of an action.
pub trait QFunction {
    /// Scalar value of `action` (`[B, G]`) in `state`, averaged over pairs.
    /// With `trainable` false the function's own parameters are held fixed.
    fn q_value(&mut self, g: &mut Graph, state: &AgentState, action: Var, trainable: bool) -> Result<Var>;
}

/// State-action value network; the action joins the pooled state features.
pub struct Critic {
    pub store: ParamStore,
    trunk: Trunk,
    pub fc0: Linear,
    pub fc1: Linear,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(cfg: &AgentConfig, c_state: usize, regions: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let trunk = Trunk::new(&mut store, "agent.critic", c_state, cfg.trunk_channels, rng)?;
        let fc0 = Linear::new(&mut store, "agent.critic.fc0", cfg.trunk_channels + regions, cfg.hidden, rng)?;
        let fc1 = Linear::new(&mut store, "agent.critic.fc1", cfg.hidden, 1, rng)?;
        Ok(Self { store, trunk, fc0, fc1 })
    }

    /// Per-pair values `[B, 1]`.
    pub fn q_values(&mut self, g: &mut Graph, state: &AgentState, action: Var, trainable: bool) -> Result<Var> {
        let (b, _) = state.check()?;
        let a = g.try_value(action)?.shape().to_vec();
        if a.len() != 2 || a[0] != b {
            return Err(MidError::Config(format!("action {a:?} does not match a batch of {b}")));
        }
        // Only trainable passes refresh the normalization statistics.
        let mode = NormMode::Train { update_stats: trainable };
        let h = self.trunk.forward(g, &mut self.store, state, mode, trainable)?;
        let h = g.concat(&[h, action], 1)?;
        let h = self.fc0.forward(g, &self.store, h, trainable)?;
        let h = g.relu(h)?;
        self.fc1.forward(g, &self.store, h, trainable)
    }
}

impl QFunction for Critic {
    fn q_value(&mut self, g: &mut Graph, state: &AgentState, action: Var, trainable: bool) -> Result<Var> {
        let q = self.q_values(g, state, action, trainable)?;
        Ok(g.mean(q)?)
    }
}

/// Scores before and after adding the mixed-modality similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardRecord {
    pub reward: f64,
    pub e_rgb_ir: f64,
    pub e_rgb_ir_mixed: f64,
    pub e_ir_rgb: f64,
    pub e_ir_rgb_mixed: f64,
}

impl RewardRecord {
    fn from_scores(e_rgb_ir: f64, e_rgb_ir_mixed: f64, e_ir_rgb: f64, e_ir_rgb_mixed: f64) -> Self {
        let mut r = Self { reward: 0.0, e_rgb_ir, e_rgb_ir_mixed, e_ir_rgb, e_ir_rgb_mixed };
        r.reward = r.recombined();
        r
    }

    /// The reward recomputed from the four stored scores.
    pub fn recombined(&self) -> f64 {
        (self.e_rgb_ir_mixed - self.e_rgb_ir) + (self.e_ir_rgb_mixed - self.e_ir_rgb)
    }
}

/// Reward from the four similarity matrices. Rows of `s_mix_ir` and
/// `s_mix_rgb` index the mixed image of each pair, so they add elementwise to
/// `s_rgb_ir` and its transpose.
pub fn reward_from_similarities(
    s_rgb_ir: &SimilarityMatrix,
    s_mix_ir: &SimilarityMatrix,
    s_mix_rgb: &SimilarityMatrix,
    k: usize,
) -> Result<RewardRecord> {
    let s_ir_rgb = s_rgb_ir.transpose()?;
    let e_rgb_ir = eval_score(s_rgb_ir, k)?;
    let e_rgb_ir_mixed = eval_score(&s_rgb_ir.add(s_mix_ir)?, k)?;
    let e_ir_rgb = eval_score(&s_ir_rgb, k)?;
    let e_ir_rgb_mixed = eval_score(&s_ir_rgb.add(s_mix_rgb)?, k)?;
    Ok(RewardRecord::from_scores(e_rgb_ir, e_rgb_ir_mixed, e_ir_rgb, e_ir_rgb_mixed))
}

/// Retrieval improvement obtained by adding mixed-image similarities, on
/// detached `[b, D]` features of the pairs of one batch.
pub fn compute_reward(
    f_rgb: &Tensor,
    f_ir: &Tensor,
    f_mix: &Tensor,
    labels: &[usize],
    k: usize,
) -> Result<RewardRecord> {
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(MidError::Metric("reward needs at least two identities in the batch".into()));
    }
    let s_rgb_ir = cosine_similarity_matrix(f_rgb, f_ir, labels, labels)?;
    let s_mix_ir = cosine_similarity_matrix(f_mix, f_ir, labels, labels)?;
    let s_mix_rgb = cosine_similarity_matrix(f_mix, f_rgb, labels, labels)?;
    reward_from_similarities(&s_rgb_ir, &s_mix_ir, &s_mix_rgb, k)
}

/// Actor, critic and their optimizers.
pub struct AgentNets {
    pub actor: Actor,
    pub critic: Critic,
    pub actor_opt: Optimizer,
    pub critic_opt: Optimizer,
    pub noise_std: f32,
    regions: usize,
}

/// Actions of one step: the deterministic policy output and the executed,
/// noise-perturbed version.
#[derive(Clone, Debug)]
pub struct Action {
    pub policy: MixRatioVector,
    pub executed: MixRatioVector,
}

impl AgentNets {
    pub fn new<R: Rng + ?Sized>(cfg: &AgentConfig, c_state: usize, regions: usize, rng: &mut R) -> Result<Self> {
        if !(cfg.lr > 0.0 && cfg.noise_std >= 0.0) {
            return Err(MidError::Config(format!(
                "agent lr {} must be positive and noise {} non-negative",
                cfg.lr, cfg.noise_std
            )));
        }
        Ok(Self {
            actor: Actor::new(cfg, c_state, regions, rng)?,
            critic: Critic::new(cfg, c_state, regions, rng)?,
            actor_opt: Optimizer::new(OptimizerKind::adam(), cfg.lr),
            critic_opt: Optimizer::new(OptimizerKind::adam(), cfg.lr),
            noise_std: cfg.noise_std,
            regions,
        })
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    /// Policy ratios for `state`; with `explore` the executed action carries
    /// clamped Gaussian noise.
    pub fn act<R: Rng + ?Sized>(&mut self, state: &AgentState, explore: bool, rng: &mut R) -> Result<Action> {
        let mut g = Graph::new();
        let m = self.actor.forward(&mut g, state, NormMode::TRAIN, false)?;
        let policy = MixRatioVector::new(g.value(m).clone())?;
        let executed = if explore && self.noise_std > 0.0 {
            let noise = Normal::new(0.0f32, self.noise_std).expect("validated std");
            let mut v = policy.values().clone();
            for x in v.data_mut() {
                *x = (*x + noise.sample(rng)).clamp(0.0, 1.0);
            }
            MixRatioVector::new(v)?
        } else {
            policy.clone()
        };
        Ok(Action { policy, executed })
    }

    /// Critic step on the observed reward, then actor step against the
    /// updated critic. Returns `(L_A, L_Q)`.
    pub fn update(
        &mut self,
        state: &AgentState,
        executed: &MixRatioVector,
        reward: &RewardRecord,
    ) -> Result<(f32, f32)> {
        agent_update(self, state, executed, reward)
    }
}

/// One regression step of the critic toward the observed reward.
pub fn critic_step(
    critic: &mut Critic,
    opt: &mut Optimizer,
    state: &AgentState,
    action: &MixRatioVector,
    reward: f32,
) -> Result<f32> {
    if !reward.is_finite() {
        return Err(MidError::Metric(format!("reward {reward} is not finite")));
    }
    let mut g = Graph::new();
    let a = g.constant(action.values().clone());
    let q = critic.q_value(&mut g, state, a, true)?;
    let diff = g.add_scalar(q, -reward)?;
    let loss = g.square(diff)?;
    let value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    critic.store.accumulate(&grads);
    opt.step(&mut critic.store)?;
    Ok(value)
}

/// One ascent step of the actor on `q`, whose parameters stay fixed.
pub fn actor_step(actor: &mut Actor, opt: &mut Optimizer, q: &mut dyn QFunction, state: &AgentState) -> Result<f32> {
    let mut g = Graph::new();
    let m = actor.forward(&mut g, state, NormMode::Train { update_stats: false }, true)?;
    let value = q.q_value(&mut g, state, m, false)?;
    let loss = g.scale(value, -1.0)?;
    let l = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    actor.store.accumulate(&grads);
    opt.step(&mut actor.store)?;
    Ok(l)
}

/// Critic regression on the executed action's reward followed by an actor
/// step through the frozen critic. Returns `(L_A, L_Q)`.
pub fn agent_update(
    agent: &mut AgentNets,
    state: &AgentState,
    executed: &MixRatioVector,
    reward: &RewardRecord,
) -> Result<(f32, f32)> {
    if !reward.reward.is_finite() {
        return Err(MidError::Metric(format!("reward {} is not finite", reward.reward)));
    }
    let l_q = critic_step(&mut agent.critic, &mut agent.critic_opt, state, executed, reward.reward as f32)?;
    let l_a = actor_step(&mut agent.actor, &mut agent.actor_opt, &mut agent.critic, state)?;
    Ok((l_a, l_q))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn regions_follow_floor_rule() {
        let x = Tensor::zeros(&[1, 3, 7, 2]);
        assert_eq!(partition_regions(&x, 3).unwrap(), vec![0..2, 2..4, 4..7]);
        assert_eq!(partition_regions(&x, 1).unwrap(), vec![0..7]);
        assert!(partition_regions(&x, 8).is_err());
        let y = Tensor::zeros(&[1, 3, 72, 36]);
        assert!(partition_regions(&y, 6).unwrap().iter().all(|r| r.len() == 12));
    }

    #[test]
    fn constant_stripes_hand_case() {
        let rgb = Tensor::full(&[1, 3, 4, 2], 1.0);
        let ir = Tensor::zeros(&[1, 3, 4, 2]);
        let m = MixRatioVector::new(Tensor::new(&[1, 2], vec![0.3, 0.8]).unwrap()).unwrap();
        let out = mix_pair(&rgb, &ir, &m).unwrap();
        for ch in 0..3 {
            let plane = &out.data()[ch * 8..(ch + 1) * 8];
            assert!(plane[..4].iter().all(|&v| (v - 0.3).abs() < 1e-7));
            assert!(plane[4..].iter().all(|&v| (v - 0.8).abs() < 1e-7));
        }
    }

    #[test]
    fn ratios_outside_unit_interval_rejected() {
        assert!(MixRatioVector::new(Tensor::new(&[1, 2], vec![0.5, 1.5]).unwrap()).is_err());
        assert!(MixRatioVector::new(Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn beta_ratios_broadcast_per_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = beta_ratios(4, 6, 1.0, &mut rng).unwrap();
        for i in 0..4 {
            assert!((1..6).all(|g| m.get(i, g) == m.get(i, 0)));
        }
    }

    #[test]
    fn scheme_parses() {
        assert_eq!("mam".parse::<MixupScheme>().unwrap(), MixupScheme::Mam);
        assert!("cutmix".parse::<MixupScheme>().is_err());
    }

    #[test]
    fn reward_needs_two_identities() {
        let f = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(compute_reward(&f, &f, &f, &[3, 3], 2).is_err());
    }
}
