//! The feature network: a small residual CNN whose lowest blocks use
//! decomposed convolutions, with global and part-pooled embedding heads.

use mid_tensor::{Graph, NormMode, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MidError, Result};
use crate::macd::{init_decomposition, DecomposedConv, ForwardPath};
use crate::modality::Modality;
use crate::nn::{BatchNorm, Conv2d, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_blocks: usize,
    /// Blocks, counted from the input, whose 3×3 convolutions are decomposed.
    pub n_decomposed: usize,
    /// Blocks whose output is the agent's state.
    pub state_blocks: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub channels: Vec<usize>,
    /// Stride of each block; the last entry is the last-stage stride.
    pub strides: Vec<usize>,
    pub parts: usize,
    pub feature_dim: usize,
    pub kernel: usize,
    /// Bases per decomposed layer; `kernel²` when absent.
    pub k_bases: Option<usize>,
    pub per_modality_bn: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_blocks: 5,
            n_decomposed: 3,
            state_blocks: 3,
            stem_channels: 16,
            stem_stride: 2,
            channels: vec![16, 32, 64, 128, 128],
            strides: vec![1, 2, 2, 1, 1],
            parts: 6,
            feature_dim: 64,
            kernel: 3,
            k_bases: None,
            per_modality_bn: false,
        }
    }
}

fn conv_out(size: usize, stride: usize) -> usize {
    // 3×3 with padding 1 and 1×1 with padding 0 agree on this size.
    (size - 1) / stride + 1
}

impl NetworkConfig {
    pub fn k_bases(&self) -> usize {
        self.k_bases.unwrap_or(self.kernel * self.kernel)
    }

    /// Spatial size after the stem and the first `blocks` blocks.
    pub fn spatial_after(&self, blocks: usize, input: (usize, usize)) -> (usize, usize) {
        let mut h = conv_out(input.0, self.stem_stride);
        let mut w = conv_out(input.1, self.stem_stride);
        for &s in &self.strides[..blocks] {
            h = conv_out(h, s);
            w = conv_out(w, s);
        }
        (h, w)
    }

    pub fn validate(&self, input: (usize, usize)) -> Result<()> {
        let err = |m: String| Err(MidError::Config(m));
        if self.n_blocks == 0 || self.channels.len() != self.n_blocks || self.strides.len() != self.n_blocks {
            return err(format!(
                "{} blocks need as many channel ({}) and stride ({}) entries",
                self.n_blocks,
                self.channels.len(),
                self.strides.len()
            ));
        }
        if self.n_decomposed > self.n_blocks {
            return err(format!("{} decomposed blocks exceed {} blocks", self.n_decomposed, self.n_blocks));
        }
        if self.state_blocks == 0 || self.state_blocks > self.n_blocks {
            return err(format!("state taken after block {} of {}", self.state_blocks, self.n_blocks));
        }
        if self.kernel.is_multiple_of(2) || self.k_bases() == 0 {
            return err(format!("kernel {} must be odd with at least one basis", self.kernel));
        }
        let positive = [self.stem_channels, self.stem_stride, self.parts, self.feature_dim];
        if positive.contains(&0) || self.channels.contains(&0) || self.strides.contains(&0) {
            return err("sizes and strides must be positive".into());
        }
        if input.0 == 0 || input.1 == 0 {
            return err("empty input".into());
        }
        let (h, _) = self.spatial_after(self.n_blocks, input);
        if self.parts > h {
            return err(format!("{} parts exceed the final feature height {h}", self.parts));
        }
        Ok(())
    }
}

/// Contiguous runs of one modality inside a batch, in batch order.
pub type Segments = [(Modality, usize)];

fn segment_total(segments: &Segments) -> usize {
    segments.iter().map(|s| s.1).sum()
}

/// Applies `f` to each modality segment of `x` and stitches the results.
fn per_segment(
    g: &mut Graph,
    x: Var,
    segments: &Segments,
    mut f: impl FnMut(&mut Graph, Var, Modality) -> Result<Var>,
) -> Result<Var> {
    if let [(m, _)] = segments {
        return f(g, x, *m);
    }
    let mut outs = Vec::with_capacity(segments.len());
    let mut start = 0;
    for &(m, n) in segments {
        let part = g.narrow(x, 0, start, n)?;
        outs.push(f(g, part, m)?);
        start += n;
    }
    Ok(g.concat(&outs, 0)?)
}

#[derive(Clone, Debug)]
enum ConvLayer {
    Shared(Conv2d),
    Decomposed(DecomposedConv),
}

#[derive(Clone, Debug)]
enum Norm {
    Shared(BatchNorm),
    /// One normalization per modality, indexed by [`Modality::index`].
    PerModality(Vec<BatchNorm>),
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, channels: usize, per_modality: bool) -> Result<Self> {
        if per_modality {
            let layers = Modality::ALL
                .iter()
                .map(|m| BatchNorm::new(store, &format!("{name}.{m}"), channels))
                .collect::<Result<Vec<_>>>()?;
            Ok(Norm::PerModality(layers))
        } else {
            Ok(Norm::Shared(BatchNorm::new(store, name, channels)?))
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        segments: &Segments,
        mode: NormMode,
        trainable: bool,
    ) -> Result<Var> {
        match self {
            Norm::Shared(bn) => bn.forward(g, store, x, mode, trainable),
            Norm::PerModality(layers) => {
                per_segment(g, x, segments, |g, part, m| layers[m.index()].forward(g, store, part, mode, trainable))
            }
        }
    }
}

struct Pass<'a> {
    segments: &'a Segments,
    mode: NormMode,
    trainable: bool,
    path: ForwardPath,
}

impl ConvLayer {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, pass: &Pass<'_>) -> Result<Var> {
        match self {
            ConvLayer::Shared(c) => c.forward(g, store, x, pass.trainable),
            ConvLayer::Decomposed(d) => {
                per_segment(g, x, pass.segments, |g, part, m| d.forward(g, store, part, m, pass.path, pass.trainable))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: ConvLayer,
    bn1: Norm,
    conv2: ConvLayer,
    bn2: Norm,
    shortcut: Option<(Conv2d, Norm)>,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        decomposed: bool,
        cfg: &NetworkConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let s = cfg.kernel;
        let pad = s / 2;
        let mut conv = |store: &mut ParamStore, layer: &str, ci: usize, st: usize| -> Result<ConvLayer> {
            let name = format!("{name}.{layer}");
            if decomposed {
                let p = init_decomposition(cfg.k_bases(), s, ci, c_out, rng)?;
                Ok(ConvLayer::Decomposed(DecomposedConv::register(store, &name, p, st, pad)?))
            } else {
                Ok(ConvLayer::Shared(Conv2d::new(store, &name, ci, c_out, s, st, pad, rng)?))
            }
        };
        let conv1 = conv(store, "conv1", c_in, stride)?;
        let bn1 = Norm::new(store, &format!("{name}.bn1"), c_out, decomposed && cfg.per_modality_bn)?;
        let conv2 = conv(store, "conv2", c_out, 1)?;
        let bn2 = Norm::new(store, &format!("{name}.bn2"), c_out, decomposed && cfg.per_modality_bn)?;
        let shortcut = if c_in != c_out || stride != 1 {
            let c = Conv2d::new(store, &format!("{name}.downsample.conv"), c_in, c_out, 1, stride, 0, rng)?;
            let n = Norm::new(store, &format!("{name}.downsample.bn"), c_out, decomposed && cfg.per_modality_bn)?;
            Some((c, n))
        } else {
            None
        };
        Ok(Self { conv1, bn1, conv2, bn2, shortcut })
    }

    fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, pass: &Pass<'_>) -> Result<Var> {
        let h = self.conv1.forward(g, store, x, pass)?;
        let h = self.bn1.forward(g, store, h, pass.segments, pass.mode, pass.trainable)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h, pass)?;
        let h = self.bn2.forward(g, store, h, pass.segments, pass.mode, pass.trainable)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(g, store, x, pass.trainable)?;
                norm.forward(g, store, s, pass.segments, pass.mode, pass.trainable)?
            }
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum)?)
    }
}

/// One embedding branch: pooled features → linear embedding → classifier.
#[derive(Clone, Debug)]
struct Branch {
    embed: Linear,
    classifier: Linear,
}

/// Graph handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    /// Output of the state blocks, `[B, C, H', W']`.
    pub state: Var,
    /// Global embedding `[B, D]`, before normalization.
    pub global: Var,
    /// One `[B, D]` embedding per part stripe, top to bottom.
    pub parts: Vec<Var>,
    /// L2-normalized global and part embeddings concatenated, `[B, D·(G+1)]`.
    pub retrieval: Var,
    /// Classifier logits `[B, P]`, global head first.
    pub logits: Vec<Var>,
}

pub struct Network {
    config: NetworkConfig,
    input: (usize, usize),
    n_identities: usize,
    pub store: ParamStore,
    pub path: ForwardPath,
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<ResidualBlock>,
    branches: Vec<Branch>,
}

/// Builds the network for `n_identities` training classes and inputs of
/// `input = (height, width)`.
pub fn build_network<R: Rng + ?Sized>(
    cfg: &NetworkConfig,
    n_identities: usize,
    input: (usize, usize),
    rng: &mut R,
) -> Result<Network> {
    cfg.validate(input)?;
    if n_identities < 2 {
        return Err(MidError::Config(format!("{n_identities} identities; classification needs two")));
    }
    let mut store = ParamStore::new();
    let stem = Conv2d::new(
        &mut store,
        "backbone.stem.conv",
        3,
        cfg.stem_channels,
        cfg.kernel,
        cfg.stem_stride,
        cfg.kernel / 2,
        rng,
    )?;
    let stem_bn = BatchNorm::new(&mut store, "backbone.stem.bn", cfg.stem_channels)?;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    let mut c_in = cfg.stem_channels;
    for (i, (&c_out, &stride)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
        let name = format!("backbone.block{}", i + 1);
        blocks.push(ResidualBlock::new(&mut store, &name, c_in, c_out, stride, i < cfg.n_decomposed, cfg, rng)?);
        c_in = c_out;
    }
    let d = cfg.feature_dim;
    let branches = (0..=cfg.parts)
        .map(|b| {
            let name = if b == 0 { "head.global".to_string() } else { format!("head.part{b}") };
            Ok(Branch {
                embed: Linear::new(&mut store, &format!("{name}.embed"), c_in, d, rng)?,
                classifier: Linear::new(&mut store, &format!("{name}.classifier"), d, n_identities, rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Network {
        config: cfg.clone(),
        input,
        n_identities,
        store,
        path: ForwardPath::Composed,
        stem,
        stem_bn,
        blocks,
        branches,
    })
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn n_identities(&self) -> usize {
        self.n_identities
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input
    }

    pub fn retrieval_dim(&self) -> usize {
        self.config.feature_dim * (self.config.parts + 1)
    }

    /// Number of trainable values.
    pub fn param_count(&self) -> usize {
        self.store.num_params()
    }

    /// Trainable values belonging to modality-specific bases.
    pub fn modality_specific_count(&self) -> usize {
        self.store.count_where(|n| n.contains(".alpha."))
    }

    fn check_input(&self, g: &Graph, x: Var, segments: &Segments) -> Result<()> {
        let s = g.try_value(x)?.shape();
        let expected = [segment_total(segments), 3, self.input.0, self.input.1];
        if s != expected {
            return Err(MidError::Config(format!("input {s:?}, network expects {expected:?}")));
        }
        Ok(())
    }

    fn stem_and_blocks(&mut self, g: &mut Graph, x: Var, upto: usize, pass: &Pass<'_>) -> Result<Var> {
        let h = self.stem.forward(g, &self.store, x, pass.trainable)?;
        let h = self.stem_bn.forward(g, &mut self.store, h, pass.mode, pass.trainable)?;
        let mut h = g.relu(h)?;
        for block in &self.blocks[..upto] {
            h = block.forward(g, &mut self.store, h, pass)?;
        }
        Ok(h)
    }

    /// Full forward pass over a batch made of modality segments.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        x: Var,
        segments: &Segments,
        mode: NormMode,
        trainable: bool,
    ) -> Result<FeatureBundle> {
        self.check_input(g, x, segments)?;
        let pass = Pass { segments, mode, trainable, path: self.path };
        let state = self.stem_and_blocks(g, x, self.config.state_blocks, &pass)?;
        let mut h = state;
        for i in self.config.state_blocks..self.blocks.len() {
            h = self.blocks[i].forward(g, &mut self.store, h, &pass)?;
        }
        let b = segment_total(segments);
        let pooled_global = g.global_avg_pool(h)?;
        let pooled_parts = g.region_avg_pool(h, self.config.parts)?;
        let c = g.shape(h)[1];
        let mut embeddings = Vec::with_capacity(self.branches.len());
        let mut logits = Vec::with_capacity(self.branches.len());
        for (i, branch) in self.branches.iter().enumerate() {
            let input = if i == 0 {
                pooled_global
            } else {
                let part = g.narrow(pooled_parts, 2, i - 1, 1)?;
                g.reshape(part, &[b, c])?
            };
            let e = branch.embed.forward(g, &self.store, input, trainable)?;
            logits.push(branch.classifier.forward(g, &self.store, e, trainable)?);
            embeddings.push(e);
        }
        let normalized = embeddings.iter().map(|&e| g.l2_normalize(e)).collect::<Result<Vec<_>, _>>()?;
        let retrieval = g.concat(&normalized, 1)?;
        Ok(FeatureBundle { state, global: embeddings[0], parts: embeddings[1..].to_vec(), retrieval, logits })
    }

    /// Single-modality trainable forward pass.
    pub fn forward_features(
        &mut self,
        g: &mut Graph,
        x: Var,
        modality: Modality,
        mode: NormMode,
    ) -> Result<FeatureBundle> {
        let n = g.try_value(x)?.shape().first().copied().unwrap_or(0);
        self.forward(g, x, &[(modality, n)], mode, true)
    }

    /// Output of the state blocks as a plain tensor; nothing downstream can
    /// send gradients into the network through it.
    pub fn extract_state(&mut self, x: &Tensor, segments: &Segments, mode: NormMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        self.check_input(&g, xv, segments)?;
        let pass = Pass { segments, mode, trainable: false, path: self.path };
        let s = self.stem_and_blocks(&mut g, xv, self.config.state_blocks, &pass)?;
        Ok(g.value(s).clone())
    }

    /// Retrieval features of preprocessed images `[N, 3, H, W]` in eval mode,
    /// computed in chunks of `chunk` images.
    pub fn embed(&mut self, x: &Tensor, modality: Modality, chunk: usize) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        let chunk = chunk.max(1);
        let mut rows = Vec::with_capacity(n * self.retrieval_dim());
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let images: Vec<Tensor> = (start..start + len).map(|i| x.index_first(i)).collect::<Result<_, _>>()?;
            let refs: Vec<&Tensor> = images.iter().collect();
            let mut g = Graph::new();
            let xv = g.constant(Tensor::stack(&refs)?);
            let f = self.forward(&mut g, xv, &[(modality, len)], NormMode::Eval, false)?;
            rows.extend_from_slice(g.value(f.retrieval).data());
            start += len;
        }
        Ok(Tensor::new(&[n, self.retrieval_dim()], rows)?)
    }
}
