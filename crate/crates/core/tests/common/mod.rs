//! Helpers shared by the integration tests: independent oracles, finite
//! difference cases and a small fast training configuration.
#![allow(dead_code)]

use std::path::Path;

use mid_core::agent::{
    actor_step, critic_step, mix_pair, reward_from_similarities, Actor, AgentConfig, AgentState, Critic,
    MixRatioVector, MixupScheme, QFunction,
};
use mid_core::backbone::{build_network, NetworkConfig};
use mid_core::config::RunConfig;
use mid_core::data::{BatchSpec, Dataset};
use mid_core::losses::{
    center_triplet, compute_centers, id_loss, smoothed_cross_entropy, total_loss, LossWeights, ModalityOutputs,
};
use mid_core::macd::{
    compose_filters, composed_conv, decomposed_param_count, full_param_count, init_decomposition, two_stage_conv,
};
use mid_core::metrics::{cmc_rank_k, eval_score, mean_ap, SimilarityMatrix};
use mid_core::Modality;
use mid_tensor::gradcheck::check_gradients;
use mid_tensor::{Graph, NormMode, Optimizer, OptimizerKind, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- metrics

/// Position of gallery item `j` in query `q`'s ranking, found by counting the
/// items placed before it (higher similarity, or equal with a lower index).
fn position(row: &[f64], j: usize) -> usize {
    (0..row.len()).filter(|&i| row[i] > row[j] || (row[i] == row[j] && i < j)).count()
}

/// Rank-k hit rate by direct enumeration.
pub fn brute_cmc(values: &[f64], n_g: usize, ql: &[usize], gl: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (q, row) in values.chunks(n_g).enumerate() {
        let first = (0..n_g).filter(|&j| gl[j] == ql[q]).map(|j| position(row, j)).min().unwrap();
        if first < k {
            hits += 1;
        }
    }
    hits as f64 / ql.len() as f64
}

/// Mean over queries of average precision, by direct enumeration.
pub fn brute_map(values: &[f64], n_g: usize, ql: &[usize], gl: &[usize]) -> f64 {
    let mut total = 0.0;
    for (q, row) in values.chunks(n_g).enumerate() {
        let mut pos: Vec<usize> = (0..n_g).filter(|&j| gl[j] == ql[q]).map(|j| position(row, j)).collect();
        pos.sort_unstable();
        let ap: f64 = pos.iter().enumerate().map(|(hit, &p)| (hit + 1) as f64 / (p + 1) as f64).sum();
        total += ap / pos.len() as f64;
    }
    total / ql.len() as f64
}

/// `mAP + Σ_{k=1..K} rank-k / k`, by direct enumeration.
pub fn brute_eval_score(values: &[f64], n_g: usize, ql: &[usize], gl: &[usize], k: usize) -> f64 {
    brute_map(values, n_g, ql, gl) + (1..=k).map(|r| brute_cmc(values, n_g, ql, gl, r) / r as f64).sum::<f64>()
}

/// Random query/gallery labels where every query identity occurs in the
/// gallery, with coarse values so ties happen.
pub fn random_matrix(rng: &mut ChaCha8Rng, max: usize) -> (Vec<f64>, usize, Vec<usize>, Vec<usize>) {
    let n_q = rng.random_range(1..=max);
    let n_g = rng.random_range(2..=max);
    let n_ids = rng.random_range(1..=n_g.min(4));
    let mut gl: Vec<usize> = (0..n_g).map(|j| if j < n_ids { j } else { rng.random_range(0..n_ids) }).collect();
    // Shuffle so matches sit at random positions.
    for i in (1..n_g).rev() {
        gl.swap(i, rng.random_range(0..=i));
    }
    let ql: Vec<usize> = (0..n_q).map(|_| rng.random_range(0..n_ids)).collect();
    let values = (0..n_q * n_g).map(|_| (rng.random_range(-10..=10) as f64) / 10.0).collect();
    (values, n_g, ql, gl)
}

/// Compares CMC at every rank, mAP and the score with the enumeration
/// oracles on `trials` random matrices. Returns the largest difference.
pub fn check_metric_oracle(trials: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (values, n_g, ql, gl) = random_matrix(&mut rng, 8);
        let s = SimilarityMatrix::new(values.clone(), ql.clone(), gl.clone()).map_err(|e| e.to_string())?;
        let mut diffs = vec![(mean_ap(&s).unwrap() - brute_map(&values, n_g, &ql, &gl)).abs()];
        for k in 1..=n_g {
            diffs.push((cmc_rank_k(&s, k).unwrap() - brute_cmc(&values, n_g, &ql, &gl, k)).abs());
        }
        let k = n_g.min(4);
        diffs.push((eval_score(&s, k).unwrap() - brute_eval_score(&values, n_g, &ql, &gl, k)).abs());
        let d = diffs.into_iter().fold(0.0, f64::max);
        if !(d < 1e-9) {
            return Err(format!("matrix {trial}: metrics differ from the oracle by {d:e}"));
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Score of a retrieval where every match outranks every non-match: four
/// identities with four gallery images each, K = 4.
pub fn perfect_retrieval_score() -> f64 {
    let gl: Vec<usize> = (0..16).map(|j| j / 4).collect();
    let ql: Vec<usize> = (0..4).collect();
    let values = ql.iter().flat_map(|&q| gl.iter().map(move |&g| if g == q { 0.9 } else { 0.1 })).collect();
    eval_score(&SimilarityMatrix::new(values, ql, gl).unwrap(), 4).unwrap()
}

pub const PERFECT_SCORE: f64 = 1.0 + 1.0 + 0.5 + 1.0 / 3.0 + 0.25;

// ------------------------------------------------------------------- macd

/// Two-stage against composed convolution on `configs` random shapes, with
/// factors at the scale the network initializes them. Returns the largest
/// max-abs difference.
pub fn check_macd_equivalence(configs: u64) -> Result<f32, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f32;
    for trial in 0..configs {
        let k = rng.random_range(1..10);
        let s = [1, 3, 5][rng.random_range(0..3)];
        let (ci, co) = (rng.random_range(1..6), rng.random_range(1..6));
        let (b, h, w) = (rng.random_range(1..3), rng.random_range(s..s + 7), rng.random_range(s..s + 5));
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..=s / 2);
        let x = Tensor::randn(&[b, ci, h, w], 1.0, &mut rng);
        let params = init_decomposition(k, s, ci, co, &mut rng).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let (xv, a, p) = (g.constant(x), g.constant(params.alpha_rgb), g.constant(params.psi));
        let one = composed_conv(&mut g, xv, a, p, stride, pad).map_err(|e| e.to_string())?;
        let two = two_stage_conv(&mut g, xv, a, p, stride, pad).map_err(|e| e.to_string())?;
        if g.value(one).shape() != g.value(two).shape() {
            return Err(format!("config {trial}: output shapes differ"));
        }
        let diff =
            g.value(one).data().iter().zip(g.value(two).data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        if !(diff < 1e-5) {
            return Err(format!("config {trial} (K {k}, {s}x{s}, {ci}->{co}): max diff {diff:e}"));
        }
        worst = worst.max(diff);
    }
    Ok(worst)
}

/// Trainable values, counted from the architecture description alone.
pub fn expected_params(cfg: &NetworkConfig, n_ids: usize) -> usize {
    let k2 = cfg.kernel * cfg.kernel;
    let bn = |c: usize| 2 * c;
    let conv = |ci: usize, co: usize, decomposed: bool| {
        if decomposed {
            3 * cfg.k_bases() * k2 + cfg.k_bases() * ci * co
        } else {
            k2 * ci * co
        }
    };
    let mut total = 3 * cfg.stem_channels * k2 + bn(cfg.stem_channels);
    let mut ci = cfg.stem_channels;
    for i in 0..cfg.n_blocks {
        let (co, s, d) = (cfg.channels[i], cfg.strides[i], i < cfg.n_decomposed);
        total += conv(ci, co, d) + bn(co) + conv(co, co, d) + bn(co);
        if ci != co || s != 1 {
            total += ci * co + bn(co);
        }
        ci = co;
    }
    let d = cfg.feature_dim;
    total + (cfg.parts + 1) * (ci * d + d + d * n_ids + n_ids)
}

/// Layer and network parameter counts against the closed forms.
pub fn check_param_counts() -> Result<String, String> {
    for (k, s, ci, co) in [(9, 3, 64, 64), (4, 3, 5, 7), (1, 1, 1, 1), (9, 5, 3, 16)] {
        let p = init_decomposition(k, s, ci, co, &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
        let stored = 3 * p.alpha_rgb.numel() + p.psi.numel();
        let formula = 3 * k * s * s + k * ci * co;
        if stored != formula || decomposed_param_count(k, s, ci, co) != formula {
            return Err(format!("layer K {k} {s}x{s} {ci}->{co}: {stored} stored, formula {formula}"));
        }
        if full_param_count(s, ci, co) != 3 * s * s * ci * co {
            return Err(format!("three undecomposed banks for {s}x{s} {ci}->{co}"));
        }
    }
    let mut report = Vec::new();
    for n_d in [0, 3, 5] {
        let cfg = NetworkConfig { n_decomposed: n_d, ..NetworkConfig::default() };
        let net = build_network(&cfg, 12, (72, 36), &mut ChaCha8Rng::seed_from_u64(0)).map_err(|e| e.to_string())?;
        let want = expected_params(&cfg, 12);
        if net.param_count() != want {
            return Err(format!("n_d {n_d}: network has {} parameters, formula {want}", net.param_count()));
        }
        report.push(format!("n_d={n_d}: {want}"));
    }
    Ok(report.join(", "))
}

// ----------------------------------------------------------------- losses

/// Largest gap between the ID loss at uniform logits and `ln P`.
pub fn uniform_id_loss_gap() -> f64 {
    let mut worst = 0.0f64;
    for xi in [0.0f32, 0.1] {
        for p in [2usize, 5, 12] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::full(&[3, p], 0.7));
            let l = smoothed_cross_entropy(&mut g, z, &[0, 1, p - 1], xi).unwrap();
            worst = worst.max((g.value(l).item().unwrap() as f64 - (p as f64).ln()).abs());
        }
    }
    worst
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Direct transcription of the two-sided center triplet sum.
pub fn brute_center_triplet(ca: &[Vec<f64>], cb: &[Vec<f64>], rho: f64) -> f64 {
    let p = ca.len();
    let mut total = 0.0;
    for (own, other) in [(ca, cb), (cb, ca)] {
        for i in 0..p {
            let pos = dist(&own[i], &other[i]);
            let mut neg = f64::INFINITY;
            for j in 0..p {
                if j != i {
                    neg = neg.min(dist(&own[i], &ca[j])).min(dist(&own[i], &cb[j]));
                }
            }
            total += (rho + pos - neg).max(0.0);
        }
    }
    total
}

pub fn center_triplet_value(ca: &[Vec<f64>], cb: &[Vec<f64>], rho: f32) -> f64 {
    let flat =
        |c: &[Vec<f64>]| Tensor::new(&[c.len(), c[0].len()], c.iter().flatten().map(|&v| v as f32).collect()).unwrap();
    let mut g = Graph::new();
    let a = g.constant(flat(ca));
    let b = g.constant(flat(cb));
    let l = center_triplet(&mut g, a, b, rho).unwrap();
    g.value(l).item().unwrap() as f64
}

/// Three identities with 2-D centers; some hinges are active, some not.
pub fn center_triplet_hand_case(rho: f64) -> (f64, f64) {
    let ca = vec![vec![0.0, 0.0], vec![0.6, 0.0], vec![0.0, 0.8]];
    let cb = vec![vec![0.3, 0.1], vec![0.5, 0.4], vec![0.2, 0.5]];
    (center_triplet_value(&ca, &cb, rho as f32), brute_center_triplet(&ca, &cb, rho))
}

// ------------------------------------------------------------------- data

pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

pub fn centroid(images: &[Tensor]) -> Vec<f32> {
    let mut c = vec![0.0f32; images[0].numel()];
    for img in images {
        for (s, v) in c.iter_mut().zip(img.data()) {
            *s += v / images.len() as f32;
        }
    }
    c
}

/// Nearest-centroid accuracy: queries from `queries`, centroids from `gallery`.
pub fn centroid_accuracy(queries: &[(usize, &Tensor)], gallery: &[Vec<f32>]) -> f64 {
    let hits = queries
        .iter()
        .filter(|(label, img)| {
            let best = (0..gallery.len())
                .min_by(|&a, &b| sq_dist(img.data(), &gallery[a]).total_cmp(&sq_dist(img.data(), &gallery[b])))
                .unwrap();
            best == *label
        })
        .count();
    hits as f64 / queries.len() as f64
}

/// Raw-pixel nearest-centroid accuracy across modalities, averaged over both
/// directions.
pub fn cross_modality_oracle(eval: &Dataset) -> f64 {
    let mut total = 0.0;
    for (q, g) in [(Modality::Rgb, Modality::Ir), (Modality::Ir, Modality::Rgb)] {
        let gallery: Vec<Vec<f32>> = eval.identities().iter().map(|id| centroid(id.images(g).unwrap())).collect();
        let queries: Vec<(usize, &Tensor)> = eval
            .identities()
            .iter()
            .enumerate()
            .flat_map(|(l, id)| id.images(q).unwrap().iter().map(move |t| (l, t)))
            .collect();
        total += centroid_accuracy(&queries, &gallery) / 2.0;
    }
    total
}

// ------------------------------------------------------------------ mixup

/// Mixes random batches at the two endpoints and at random ratios. Returns
/// the number of batches checked.
pub fn check_mixup_endpoints(batches: u64) -> Result<u64, String> {
    for trial in 0..batches {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + trial);
        let (b, g) = (rng.random_range(1..5), rng.random_range(1..7));
        let (h, w) = (rng.random_range(g..g + 20), rng.random_range(1..12));
        let rgb = Tensor::randn(&[b, 3, h, w], 1.0, &mut rng);
        let ir = Tensor::randn(&[b, 3, h, w], 1.0, &mut rng);
        let mix = |m: &MixRatioVector| mix_pair(&rgb, &ir, m).map_err(|e| e.to_string());
        if mix(&MixRatioVector::constant(b, g, 1.0).unwrap())? != rgb {
            return Err(format!("batch {trial}: m = 1 does not give the RGB image"));
        }
        if mix(&MixRatioVector::constant(b, g, 0.0).unwrap())? != ir {
            return Err(format!("batch {trial}: m = 0 does not give the IR image"));
        }
        let m = MixRatioVector::new(Tensor::new(&[b, g], (0..b * g).map(|_| rng.random::<f32>()).collect()).unwrap())
            .unwrap();
        let out = mix(&m)?;
        for ((o, a), v) in out.data().iter().zip(rgb.data()).zip(ir.data()) {
            // One rounding of each product and of the sum.
            let slack = 4.0 * f32::EPSILON * a.abs().max(v.abs());
            if *o < a.min(*v) - slack || *o > a.max(*v) + slack {
                return Err(format!("batch {trial}: {o} outside [{a}, {v}]"));
            }
        }
    }
    Ok(batches)
}

// ----------------------------------------------------------------- reward

/// Square pair-aligned similarity matrix with at least two identities.
fn pair_matrix(rng: &mut ChaCha8Rng, labels: &[usize]) -> SimilarityMatrix {
    let n = labels.len();
    let values = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    SimilarityMatrix::new(values, labels.to_vec(), labels.to_vec()).unwrap()
}

fn pair_labels(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let ids = rng.random_range(2..5);
    let k = rng.random_range(1..4);
    (0..ids * k).map(|i| i / k).collect()
}

/// Zero mixed similarities leave both scores unchanged, so the reward is 0.
pub fn check_zero_mix_reward(trials: u64) -> Result<u64, String> {
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1300 + trial);
        let labels = pair_labels(&mut rng);
        let s = pair_matrix(&mut rng, &labels);
        let zero = s.map(|_| 0.0).unwrap();
        let r = reward_from_similarities(&s, &zero, &zero, labels.len().min(4)).map_err(|e| e.to_string())?;
        if r.reward != 0.0 {
            return Err(format!("trial {trial}: reward {} with zero mixed similarities", r.reward));
        }
    }
    Ok(trials)
}

/// Strictly increasing maps applied to every matrix the reward scores leave
/// CMC, mAP and each score term unchanged.
pub fn check_reward_invariance(trials: u64) -> Result<u64, String> {
    let maps: [(&str, fn(f64) -> f64); 3] =
        [("exp", f64::exp), ("cube", |x| x * x * x + x), ("affine", |x| 3.0 * x - 7.0)];
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1700 + trial);
        let labels = pair_labels(&mut rng);
        let (s, s_mi, s_mr) =
            (pair_matrix(&mut rng, &labels), pair_matrix(&mut rng, &labels), pair_matrix(&mut rng, &labels));
        let k = labels.len().min(4);
        let r = reward_from_similarities(&s, &s_mi, &s_mr, k).map_err(|e| e.to_string())?;
        let st = s.transpose().unwrap();
        let scored = [
            (r.e_rgb_ir, s.clone()),
            (r.e_rgb_ir_mixed, s.add(&s_mi).unwrap()),
            (r.e_ir_rgb, st.clone()),
            (r.e_ir_rgb_mixed, st.add(&s_mr).unwrap()),
        ];
        for (name, f) in maps {
            for (term, (e, m)) in scored.iter().enumerate() {
                let t = m.map(f).unwrap();
                let same = (1..=m.n_gallery()).all(|j| cmc_rank_k(m, j).unwrap() == cmc_rank_k(&t, j).unwrap())
                    && mean_ap(m).unwrap() == mean_ap(&t).unwrap()
                    && eval_score(&t, k).unwrap() == *e;
                if !same {
                    return Err(format!("trial {trial}: `{name}` changes score term {term}"));
                }
            }
        }
        // A positive rescaling commutes with the sums, so the reward itself holds.
        let scale = |m: &SimilarityMatrix| m.map(|x| 2.5 * x).unwrap();
        let r2 = reward_from_similarities(&scale(&s), &scale(&s_mi), &scale(&s_mr), k).unwrap();
        if r2.reward != r.reward {
            return Err(format!("trial {trial}: rescaling moves the reward {} -> {}", r.reward, r2.reward));
        }
    }
    Ok(trials)
}

// ------------------------------------------------------------------ agent

pub fn agent_state(rng: &mut ChaCha8Rng, b: usize, c: usize) -> AgentState {
    AgentState { rgb: Tensor::randn(&[b, c, 6, 3], 1.0, rng), ir: Tensor::randn(&[b, c, 6, 3], 1.0, rng) }
}

/// `Q(a) = −mean_b ‖a_b − a*‖²`, with no parameters of its own.
pub struct QuadraticCritic {
    pub target: Vec<f32>,
}

impl QFunction for QuadraticCritic {
    fn q_value(&mut self, g: &mut Graph, _: &AgentState, action: Var, _: bool) -> mid_core::Result<Var> {
        let b = g.shape(action)[0];
        let target = g.constant(Tensor::new(&[b, self.target.len()], self.target.repeat(b))?);
        let d = g.sub(action, target)?;
        let sq = g.square(d)?;
        let total = g.sum(sq)?;
        Ok(g.scale(total, -1.0 / b as f32)?)
    }
}

pub const AGENT_TARGET: [f32; 6] = [0.2, 0.8, 0.35, 0.65, 0.5, 0.9];

/// Runs `steps` actor updates against the quadratic critic and returns the
/// largest per-region gap between the batch-mean action and the target.
pub fn actor_gap_after(steps: usize) -> Result<f32, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = AgentConfig::default();
    let (b, c) = (8, 8);
    let mut actor = Actor::new(&cfg, c, AGENT_TARGET.len(), &mut rng).map_err(|e| e.to_string())?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr);
    let mut q = QuadraticCritic { target: AGENT_TARGET.to_vec() };
    let state = agent_state(&mut rng, b, c);
    for _ in 0..steps {
        actor_step(&mut actor, &mut opt, &mut q, &state).map_err(|e| e.to_string())?;
    }
    let mut g = Graph::new();
    let m = actor.forward(&mut g, &state, NormMode::Train { update_stats: false }, false).map_err(|e| e.to_string())?;
    let a = g.value(m).data();
    let g_regions = AGENT_TARGET.len();
    Ok((0..g_regions)
        .map(|r| ((0..b).map(|i| a[i * g_regions + r]).sum::<f32>() / b as f32 - AGENT_TARGET[r]).abs())
        .fold(0.0, f32::max))
}

/// Critic regression loss before and after `steps` Adam steps on one fixed
/// (state, action, reward) set.
pub fn critic_losses(steps: usize) -> Result<(f32, f32), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = AgentConfig::default();
    let (b, c, regions) = (8, 8, 6);
    let mut critic = Critic::new(&cfg, c, regions, &mut rng).map_err(|e| e.to_string())?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr);
    let state = agent_state(&mut rng, b, c);
    let action = MixRatioVector::new(
        Tensor::new(&[b, regions], (0..b * regions).map(|_| rng.random::<f32>()).collect()).unwrap(),
    )
    .unwrap();
    let reward = 0.5;
    let first = critic_step(&mut critic, &mut opt, &state, &action, reward).map_err(|e| e.to_string())?;
    for _ in 1..steps {
        critic_step(&mut critic, &mut opt, &state, &action, reward).map_err(|e| e.to_string())?;
    }
    // The loss returned by a step is measured before that step's update.
    let last = critic_step(&mut critic, &mut opt, &state, &action, reward).map_err(|e| e.to_string())?;
    Ok((first, last))
}

// -------------------------------------------------------------- training

/// A run small enough to train in a few seconds.
pub fn tiny_config(out: &Path, scheme: MixupScheme) -> RunConfig {
    let mut cfg =
        RunConfig { seed: 3, epochs: 2, output_dir: out.to_path_buf(), eval_chunk: 16, ..RunConfig::default() };
    cfg.data.ids = 8;
    cfg.data.imgs_per_id = 4;
    cfg.data.height = 48;
    cfg.data.width = 24;
    cfg.data.pad = 4;
    cfg.network = NetworkConfig {
        stem_channels: 8,
        channels: vec![8, 8, 16, 16, 16],
        feature_dim: 16,
        k_bases: Some(4),
        ..NetworkConfig::default()
    };
    cfg.mixup.scheme = scheme;
    cfg.mixup.agent.trunk_channels = 8;
    cfg.mixup.agent.hidden = 8;
    cfg.batch = BatchSpec { p_ids: 3, k_imgs: 2 };
    cfg.optim.milestones = vec![1];
    cfg.optim.warmup_epochs = 0;
    cfg
}

// ------------------------------------------------------- gradient checks

pub const GRAD_TRIALS: u64 = 20;
pub const GRAD_H: f32 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Op = Box<dyn Fn(&mut Graph, &[Var]) -> mid_tensor::Result<Var>>;

pub struct GradCase {
    pub name: String,
    /// Finite-difference step.
    pub h: f32,
    pub inputs: Inputs,
    pub f: Op,
}

fn case(
    name: &str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    f: impl Fn(&mut Graph, &[Var]) -> mid_tensor::Result<Var> + 'static,
) -> GradCase {
    GradCase { name: name.to_string(), h: GRAD_H, inputs: Box::new(inputs), f: Box::new(f) }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn small(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 0.5, rng)
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Centers spread far enough apart that no hinge or nearest-negative choice
/// sits within a finite-difference step of a switch.
fn spread(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 2.0, rng)
}

/// Errors from the loss layer surface as engine errors inside the checker.
fn lift<T>(r: mid_core::Result<T>) -> mid_tensor::Result<T> {
    r.map_err(|e| match e {
        mid_core::MidError::Tensor(t) => t,
        other => panic!("{other}"),
    })
}

/// Every differentiable engine operation.
pub fn engine_cases() -> Vec<GradCase> {
    let mut v = vec![
        case("add", |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| g.add(v[0], v[1])),
        case("sub", |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| g.sub(v[0], v[1])),
        case("mul", |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)], |g, v| g.mul(v[0], v[1])),
        case("scale", |r| vec![randn(&[4], r)], |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", |r| vec![randn(&[4], r)], |g, v| g.add_scalar(v[0], 0.3)),
        case("relu", |r| vec![away_from_zero(&[3, 3], r)], |g, v| g.relu(v[0])),
        case("sigmoid", |r| vec![randn(&[3, 3], r)], |g, v| g.sigmoid(v[0])),
        case("square", |r| vec![randn(&[5], r)], |g, v| g.square(v[0])),
        case("matmul", |r| vec![randn(&[2, 3], r), randn(&[3, 2], r)], |g, v| g.matmul(v[0], v[1])),
        case(
            "linear",
            |r| vec![randn(&[3, 4], r), randn(&[4, 2], r), randn(&[2], r)],
            |g, v| g.linear(v[0], v[1], v[2]),
        ),
        case("global_avg_pool", |r| vec![randn(&[2, 3, 3, 2], r)], |g, v| g.global_avg_pool(v[0])),
        case("region_avg_pool", |r| vec![randn(&[2, 2, 7, 2], r)], |g, v| g.region_avg_pool(v[0], 3)),
        case("reshape", |r| vec![randn(&[2, 6], r)], |g, v| g.reshape(v[0], &[3, 4])),
        case("permute", |r| vec![randn(&[2, 3, 4], r)], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("concat", |r| vec![randn(&[2, 3, 2], r), randn(&[2, 1, 2], r)], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("narrow", |r| vec![randn(&[3, 5, 2], r)], |g, v| g.narrow(v[0], 1, 1, 3)),
        case("sum", |r| vec![randn(&[3, 2], r)], |g, v| g.sum(v[0])),
        case("mean", |r| vec![randn(&[3, 2], r)], |g, v| g.mean(v[0])),
        case("l2_normalize", |r| vec![randn(&[3, 4], r)], |g, v| g.l2_normalize(v[0])),
        case(
            "batch_norm train",
            |r| vec![randn(&[3, 2, 2, 2], r), randn(&[2], r), randn(&[2], r)],
            |g, v| {
                let (mut m, mut s) = (Tensor::zeros(&[2]), Tensor::full(&[2], 1.0));
                g.batch_norm2d(v[0], v[1], v[2], &mut m, &mut s, NormMode::TRAIN)
            },
        ),
        case(
            "batch_norm eval",
            |r| vec![randn(&[2, 2, 2, 2], r), randn(&[2], r), randn(&[2], r)],
            |g, v| {
                let mut m = Tensor::new(&[2], vec![0.2, -0.1]).unwrap();
                let mut s = Tensor::new(&[2], vec![0.5, 2.0]).unwrap();
                g.batch_norm2d(v[0], v[1], v[2], &mut m, &mut s, NormMode::Eval)
            },
        ),
    ];
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        v.push(case(
            &format!("conv2d s{stride} p{pad}"),
            |r| vec![small(&[2, 2, 5, 4], r), small(&[3, 2, 3, 3], r)],
            move |g, v| g.conv2d(v[0], v[1], stride, pad),
        ));
    }
    v
}

/// Decomposition operators and every loss term.
pub fn model_cases() -> Vec<GradCase> {
    let labels6 = [0usize, 0, 1, 1, 2, 2];
    vec![
        case(
            "compose_filters",
            |r| vec![small(&[4, 3, 3], r), small(&[4, 2, 3], r)],
            |g, v| lift(compose_filters(g, v[0], v[1])),
        ),
        case(
            "composed_conv",
            |r| vec![small(&[2, 2, 5, 4], r), small(&[3, 3, 3], r), small(&[3, 2, 2], r)],
            |g, v| lift(composed_conv(g, v[0], v[1], v[2], 1, 1)),
        ),
        case(
            "two_stage_conv",
            |r| vec![small(&[2, 2, 5, 4], r), small(&[3, 3, 3], r), small(&[3, 2, 2], r)],
            |g, v| lift(two_stage_conv(g, v[0], v[1], v[2], 2, 1)),
        ),
        case(
            "identification loss xi=0",
            |r| vec![randn(&[4, 3], r)],
            |g, v| lift(smoothed_cross_entropy(g, v[0], &[0, 2, 1, 2], 0.0)),
        ),
        case(
            "identification loss xi=0.1",
            |r| vec![randn(&[4, 3], r)],
            |g, v| lift(smoothed_cross_entropy(g, v[0], &[0, 2, 1, 2], 0.1)),
        ),
        case(
            "identification loss over heads",
            |r| vec![randn(&[4, 3], r), randn(&[4, 3], r)],
            |g, v| lift(id_loss(g, &[v[0], v[1]], &[1, 1, 0, 2], 0.1)),
        ),
        case(
            "feature centers",
            |r| vec![randn(&[6, 3], r)],
            move |g, v| lift(compute_centers(g, v[0], &labels6)).map(|c| c.0),
        ),
        case(
            "center triplet",
            |r| vec![spread(&[3, 2], r), spread(&[3, 2], r)],
            |g, v| lift(center_triplet(g, v[0], v[1], 0.3)),
        ),
        case(
            "center triplet wide margin",
            |r| vec![randn(&[4, 3], r), randn(&[4, 3], r)],
            |g, v| lift(center_triplet(g, v[0], v[1], 5.0)),
        ),
        GradCase {
            h: 1e-2,
            ..case(
                "total loss",
                |r| {
                    let mut xs: Vec<Tensor> = (0..3).map(|_| spread(&[6, 3], r)).collect();
                    xs.extend((0..3).map(|_| randn(&[6, 3], r)));
                    xs
                },
                move |g, v| {
                    let out =
                        |f: Var, l: Var| ModalityOutputs { features: f, logits: vec![l], labels: labels6.to_vec() };
                    let (a, b, c) = (out(v[0], v[3]), out(v[1], v[4]), out(v[2], v[5]));
                    lift(total_loss(g, &a, &b, Some(&c), &LossWeights { margin: 5.0, ..LossWeights::default() }))
                        .map(|l| l.total)
                },
            )
        },
    ]
}

/// Runs `GRAD_TRIALS` seeded trials of one case; returns the worst error or
/// a description of the first failing trial.
pub fn run_grad_case(c: &GradCase) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for trial in 0..GRAD_TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let xs = (c.inputs)(&mut rng);
        let report = check_gradients(&xs, c.h, &c.f).map_err(|e| format!("{}: {e}", c.name))?;
        if !(report.max_error < GRAD_TOL) {
            return Err(format!("{} trial {trial}: error {:.3e} at {:?}", c.name, report.max_error, report.worst));
        }
        worst = worst.max(report.max_error);
    }
    Ok(worst)
}
