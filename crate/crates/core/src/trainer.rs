//! Alternating optimization of the feature network and the mixup agent.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use mid_tensor::checkpoint::{load_checkpoint, save_checkpoint};
use mid_tensor::{Graph, NormMode, Optimizer, OptimizerKind, ParamStore, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{beta_ratios, compute_reward, mix_pair, AgentNets, AgentState, MixRatioVector, MixupScheme};
use crate::backbone::{build_network, FeatureBundle, Network};
use crate::config::{DataSource, RunConfig};
use crate::data::{
    derive_seed, generate_synthetic_dataset, load_image_directory, pk_sample, Batch, Dataset, Preprocessor,
};
use crate::error::{MidError, Result};
use crate::losses::{total_loss, LossWeights, ModalityOutputs};
use crate::metrics::{retrieval_eval, DirectionReport, RetrievalReport};
use crate::modality::Modality;

/// One row of the per-iteration training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f32,
    pub loss: f32,
    pub ct_rgb_ir: f32,
    pub ct_rgb_mix: f32,
    pub ct_ir_mix: f32,
    pub id_rgb: f32,
    pub id_ir: f32,
    pub id_mix: f32,
    pub actor_loss: Option<f32>,
    pub critic_loss: Option<f32>,
    pub reward: Option<f64>,
    pub mean_ratio: Option<f32>,
}

pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

/// Loads the configured dataset and splits off the held-out identities.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let full = match cfg.data.source {
        DataSource::Synthetic => generate_synthetic_dataset(&cfg.data.synthetic_spec())?,
        DataSource::Directory => {
            let root = cfg.data.root.as_deref().ok_or_else(|| MidError::Config("missing data.root".into()))?;
            load_image_directory(root, cfg.data.height, cfg.data.width)?
        }
    };
    full.split_holdout(cfg.data.holdout)
}

/// Training state of one run.
pub struct Trainer {
    cfg: RunConfig,
    loss: LossWeights,
    train: Dataset,
    eval: Dataset,
    pre: Preprocessor,
    pub net: Network,
    pub agent: Option<AgentNets>,
    opt: Optimizer,
    sample_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    iteration: usize,
}

fn concat_batches(parts: &[&Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<_> = parts.iter().map(|t| g.constant((*t).clone())).collect();
    let v = g.concat(&vars, 0)?;
    Ok(g.value(v).clone())
}

fn split_rows(t: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let n = t.shape()[0] / parts;
    let row: usize = t.shape()[1..].iter().product();
    (0..parts)
        .map(|p| {
            let mut shape = t.shape().to_vec();
            shape[0] = n;
            Ok(Tensor::new(&shape, t.data()[p * n * row..(p + 1) * n * row].to_vec())?)
        })
        .collect()
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let (train, eval) = load_data(&cfg)?;
        Self::with_data(cfg, train, eval)
    }

    pub fn with_data(cfg: RunConfig, train: Dataset, eval: Dataset) -> Result<Self> {
        cfg.validate()?;
        let input = (cfg.data.height, cfg.data.width);
        if (train.height(), train.width()) != input || (eval.height(), eval.width()) != input {
            return Err(MidError::Config("dataset image size differs from the configured size".into()));
        }
        if train.n_identities() < cfg.batch.p_ids {
            return Err(MidError::Config(format!(
                "{} training identities cannot fill batches of {}",
                train.n_identities(),
                cfg.batch.p_ids
            )));
        }
        let pre = Preprocessor::fit(&train, cfg.data.pad, cfg.data.flip)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
        let net = build_network(&cfg.network, train.n_identities(), input, &mut init_rng)?;
        let agent = if cfg.mixup.scheme == MixupScheme::Mam {
            let c_state = cfg.network.channels[cfg.network.state_blocks - 1];
            let mut agent_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
            Some(AgentNets::new(&cfg.mixup.agent, c_state, cfg.mixup.regions, &mut agent_rng)?)
        } else {
            None
        };
        let opt = Optimizer::new(
            OptimizerKind::SgdMomentum { momentum: cfg.optim.momentum, weight_decay: cfg.optim.weight_decay },
            cfg.optim.lr,
        );
        let trainer = Self {
            loss: cfg.effective_loss(),
            sample_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3)),
            augment_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4)),
            policy_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5)),
            cfg,
            train,
            eval,
            pre,
            net,
            agent,
            opt,
            iteration: 0,
        };
        trainer.assert_disjoint_stores()?;
        Ok(trainer)
    }

    fn stores(&self) -> Vec<&ParamStore> {
        let mut s = vec![&self.net.store];
        if let Some(a) = &self.agent {
            s.push(&a.actor.store);
            s.push(&a.critic.store);
        }
        s
    }

    /// The backbone and agent optimizers must never see the same parameter.
    fn assert_disjoint_stores(&self) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        for store in self.stores() {
            for (name, _) in store.named_tensors() {
                if !names.insert(name.to_string()) {
                    return Err(MidError::Config(format!("parameter `{name}` registered twice")));
                }
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn eval_set(&self) -> &Dataset {
        &self.eval
    }

    pub fn preprocessor(&self) -> &Preprocessor {
        &self.pre
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Batches per epoch: enough to see every training RGB image once.
    pub fn iterations_per_epoch(&self) -> usize {
        self.train.n_images(Modality::Rgb).div_ceil(self.cfg.batch.batch_size()).max(1)
    }

    pub fn sample_batch(&mut self) -> Result<Batch> {
        pk_sample(&self.train, self.cfg.batch, &mut self.sample_rng)
    }

    /// One supervised step followed, for the learned scheme, by one agent
    /// step on the reward of the same batch.
    pub fn train_step(&mut self, batch: &Batch, epoch: usize) -> Result<StepLog> {
        let b = batch.len();
        if b == 0 || batch.rgb.shape() != batch.ir.shape() {
            return Err(MidError::Data("batch is empty or its modalities differ in shape".into()));
        }
        let lr = self.cfg.optim.lr_at(epoch);
        self.opt.set_lr(lr);
        let x_rgb = self.pre.apply_batch(&batch.rgb, true, &mut self.augment_rng)?;
        let x_ir = self.pre.apply_batch(&batch.ir, true, &mut self.augment_rng)?;
        let agent_turn = self.agent.is_some() && self.iteration.is_multiple_of(self.cfg.mixup.agent_every);

        // States, then mixup ratios.
        let mut state = None;
        let ratios = match self.cfg.mixup.scheme {
            MixupScheme::None => None,
            MixupScheme::Fix => Some(MixRatioVector::constant(b, self.cfg.mixup.regions, 0.5)?),
            MixupScheme::Beta => {
                Some(beta_ratios(b, self.cfg.mixup.regions, self.cfg.mixup.beta_alpha, &mut self.policy_rng)?)
            }
            MixupScheme::Mam => {
                let pair = concat_batches(&[&x_rgb, &x_ir])?;
                let maps = self.net.extract_state(
                    &pair,
                    &[(Modality::Rgb, b), (Modality::Ir, b)],
                    NormMode::Train { update_stats: false },
                )?;
                let mut halves = split_rows(&maps, 2)?.into_iter();
                let s = AgentState { rgb: halves.next().expect("two halves"), ir: halves.next().expect("two halves") };
                let agent = self.agent.as_mut().expect("learned scheme has an agent");
                let action = agent.act(&s, agent_turn, &mut self.policy_rng)?;
                state = Some(s);
                Some(action.executed)
            }
        };

        // Supervised step on all modalities in one batch.
        let mut segments = vec![(Modality::Rgb, b), (Modality::Ir, b)];
        let mut inputs = vec![&x_rgb, &x_ir];
        let x_mix = ratios.as_ref().map(|m| mix_pair(&x_rgb, &x_ir, m)).transpose()?;
        if let Some(x) = &x_mix {
            segments.push((Modality::Mix, b));
            inputs.push(x);
        }
        let x_all = concat_batches(&inputs)?;
        let mut g = Graph::new();
        let xv = g.constant(x_all.clone());
        let bundle = self.net.forward(&mut g, xv, &segments, NormMode::TRAIN, true)?;
        let outputs = split_outputs(&mut g, &bundle, &segments, &batch.labels)?;
        let parts = total_loss(&mut g, &outputs[0], &outputs[1], outputs.get(2), &self.loss)?;
        let loss = g.value(parts.total).item()?;
        if !loss.is_finite() {
            return Err(MidError::NonFinite { what: "loss", epoch, iteration: self.iteration });
        }
        let grads = g.backward(parts.total)?;
        self.net.store.accumulate(&grads);
        self.opt.step(&mut self.net.store)?;

        let mut row = StepLog {
            epoch,
            iteration: self.iteration,
            lr,
            loss,
            ct_rgb_ir: parts.parts[0],
            ct_rgb_mix: parts.parts[1],
            ct_ir_mix: parts.parts[2],
            id_rgb: parts.parts[3],
            id_ir: parts.parts[4],
            id_mix: parts.parts[5],
            actor_loss: None,
            critic_loss: None,
            reward: None,
            mean_ratio: ratios.as_ref().map(MixRatioVector::mean),
        };

        // Reward from the updated network on the same batch, then agent step.
        if let (true, Some(state), Some(ratios)) = (agent_turn, state, ratios) {
            let mut g = Graph::new();
            let xv = g.constant(x_all);
            let f = self.net.forward(&mut g, xv, &segments, NormMode::Train { update_stats: false }, false)?;
            let feats = split_rows(g.value(f.retrieval), 3)?;
            let reward = compute_reward(&feats[0], &feats[1], &feats[2], &batch.labels, batch.spec.k_imgs)?;
            if !reward.reward.is_finite() {
                return Err(MidError::NonFinite { what: "reward", epoch, iteration: self.iteration });
            }
            let agent = self.agent.as_mut().expect("learned scheme has an agent");
            let (l_a, l_q) = agent.update(&state, &ratios, &reward)?;
            row.actor_loss = Some(l_a);
            row.critic_loss = Some(l_q);
            row.reward = Some(reward.reward);
        }
        self.iteration += 1;
        Ok(row)
    }

    /// Retrieval features of every held-out image of one modality.
    pub fn embed_eval(&mut self, modality: Modality) -> Result<(Tensor, Vec<usize>)> {
        let (x, labels) = self.pre.eval_stack(&self.eval, modality)?;
        Ok((self.net.embed(&x, modality, self.cfg.eval_chunk)?, labels))
    }

    /// Both retrieval directions on the held-out identities.
    pub fn evaluate(&mut self, epoch: usize) -> Result<RetrievalReport> {
        let (f_rgb, l_rgb) = self.embed_eval(Modality::Rgb)?;
        let (f_ir, l_ir) = self.embed_eval(Modality::Ir)?;
        retrieval_eval((Modality::Rgb, &f_rgb, &l_rgb), (Modality::Ir, &f_ir, &l_ir), epoch)
    }

    /// All network and agent tensors under their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.stores().into_iter().flat_map(|s| s.named_tensors()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self.named_tensors())?;
        Ok(())
    }

    /// Restores network (and agent, when present) values from a checkpoint.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let named = load_checkpoint(path)?;
        self.net.store.load_named(&named)?;
        if let Some(a) = &mut self.agent {
            a.actor.store.load_named(&named)?;
            a.critic.store.load_named(&named)?;
        }
        Ok(())
    }
}

/// Splits batch-level outputs into per-modality loss inputs.
fn split_outputs(
    g: &mut Graph,
    bundle: &FeatureBundle,
    segments: &[(Modality, usize)],
    labels: &[usize],
) -> Result<Vec<ModalityOutputs>> {
    let mut out = Vec::with_capacity(segments.len());
    let mut start = 0;
    for &(_, n) in segments {
        let features = g.narrow(bundle.retrieval, 0, start, n)?;
        let logits = bundle.logits.iter().map(|&l| g.narrow(l, 0, start, n)).collect::<Result<Vec<_>, _>>()?;
        out.push(ModalityOutputs { features, logits, labels: labels.to_vec() });
        start += n;
    }
    Ok(out)
}

/// What a finished run produced.
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub output_dir: PathBuf,
    pub history: Vec<RetrievalReport>,
    pub best_epoch: Option<usize>,
    pub best_map: f64,
    pub steps: usize,
}

impl FitSummary {
    pub fn last(&self) -> Option<&RetrievalReport> {
        self.history.last()
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(MidError::io(path))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file)))
}

fn tag_iteration(e: MidError, epoch: usize, iteration: usize) -> MidError {
    match e {
        MidError::Tensor(TensorError::NonFinite { op }) => MidError::NonFinite { what: op, epoch, iteration },
        other => other,
    }
}

/// Trains for `cfg.epochs`, evaluating after every epoch. Writes the config,
/// both logs and the best-mAP and last checkpoints into `cfg.output_dir`.
pub fn fit(cfg: &RunConfig) -> Result<FitSummary> {
    let mut trainer = Trainer::new(cfg.clone())?;
    fit_trainer(&mut trainer, |_| {})
}

/// [`fit`] on a prepared trainer; `on_epoch` sees every evaluation report.
pub fn fit_trainer(trainer: &mut Trainer, mut on_epoch: impl FnMut(&RetrievalReport)) -> Result<FitSummary> {
    let cfg = trainer.config().clone();
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(MidError::io(&dir))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()?).map_err(MidError::io(&cfg_path))?;
    let mut train_log = csv_writer(&dir.join(TRAIN_LOG))?;
    let mut eval_log = csv_writer(&dir.join(EVAL_LOG))?;
    // Headers are written even when no rows follow.
    train_log.write_record(StepLog::HEADER)?;
    eval_log.write_record(DirectionReport::HEADER)?;
    train_log.flush().map_err(MidError::io(dir.join(TRAIN_LOG)))?;
    eval_log.flush().map_err(MidError::io(dir.join(EVAL_LOG)))?;

    let mut summary = FitSummary {
        output_dir: dir.clone(),
        history: Vec::new(),
        best_epoch: None,
        best_map: f64::NEG_INFINITY,
        steps: 0,
    };
    if cfg.epochs == 0 {
        trainer.save(&dir.join(LAST_CKPT))?;
        trainer.save(&dir.join(BEST_CKPT))?;
        return Ok(summary);
    }
    let per_epoch = trainer.iterations_per_epoch();
    for epoch in 0..cfg.epochs {
        for _ in 0..per_epoch {
            let iteration = trainer.iteration();
            let batch = trainer.sample_batch()?;
            let row = trainer.train_step(&batch, epoch).map_err(|e| tag_iteration(e, epoch, iteration))?;
            train_log.serialize(&row)?;
            summary.steps += 1;
        }
        train_log.flush().map_err(MidError::io(dir.join(TRAIN_LOG)))?;
        let report = trainer.evaluate(epoch)?;
        for row in &report.rows {
            eval_log.serialize(row)?;
        }
        eval_log.flush().map_err(MidError::io(dir.join(EVAL_LOG)))?;
        let map = report.mean_map();
        if map > summary.best_map {
            summary.best_map = map;
            summary.best_epoch = Some(epoch);
            trainer.save(&dir.join(BEST_CKPT))?;
        }
        trainer.save(&dir.join(LAST_CKPT))?;
        on_epoch(&report);
        summary.history.push(report);
    }
    Ok(summary)
}

impl StepLog {
    pub const HEADER: [&'static str; 14] = [
        "epoch",
        "iteration",
        "lr",
        "loss",
        "ct_rgb_ir",
        "ct_rgb_mix",
        "ct_ir_mix",
        "id_rgb",
        "id_ir",
        "id_mix",
        "actor_loss",
        "critic_loss",
        "reward",
        "mean_ratio",
    ];
}

impl DirectionReport {
    pub const HEADER: [&'static str; 6] = ["direction", "rank1", "rank5", "rank10", "mAP", "epoch"];
}
