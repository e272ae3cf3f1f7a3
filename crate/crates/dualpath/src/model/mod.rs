//! The two-branch architecture.
//!
//! A residual image CNN and a residual text CNN end in twin two-layer heads
//! (fc - bn - relu - dropout - fc, weights not shared) whose outputs live in
//! one `embed_dim`-dimensional space. A single classifier matrix `W_share`
//! maps features of either modality onto group classes; sharing it is what
//! couples the two embedding spaces.
//!
//! Image blocks convolve 3x3 with symmetric padding, text blocks 1x2 with
//! one zero of right padding, mirroring each other in structure. Both paths
//! downsample by stride-2 convolutions at stage entries and finish with
//! global average pooling.

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{BnState, Graph, Mode, Pad2, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::hash_str;
use crate::tensor::Tensor;
use crate::text::TextCode;

/// Architecture hyperparameters. The desk-scale defaults train on a CPU.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Final feature dimension of both heads.
    pub embed_dim: usize,
    /// Width of word vectors produced by the lookup layer.
    pub word_embed_dim: usize,
    /// Channel schedule of the image stages.
    pub image_channels: Vec<usize>,
    /// Channel schedule of the text stages.
    pub text_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub image_size: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl ModelConfig {
    pub fn desk(num_classes: usize, vocab_size: usize) -> Self {
        ModelConfig {
            embed_dim: 64,
            word_embed_dim: 32,
            image_channels: vec![8, 16, 24, 32],
            text_channels: vec![32, 48, 64, 64],
            blocks_per_stage: 1,
            num_classes,
            dropout: 0.75,
            image_size: 32,
            text_len: 32,
            vocab_size,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.word_embed_dim == 0
            || self.num_classes == 0
            || self.vocab_size == 0
            || self.text_len == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.image_channels.is_empty() || self.text_channels.is_empty() {
            return Err(Error::Config("channel schedules must not be empty".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if self.image_size % 2 != 0 || self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size must be even and at least 8, got {}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Canonical key-value form, the basis of serialization and hashing.
    pub fn kv_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("word_embed_dim".into(), self.word_embed_dim.to_string()),
            ("image_channels".into(), join(&self.image_channels)),
            ("text_channels".into(), join(&self.text_channels)),
            ("blocks_per_stage".into(), self.blocks_per_stage.to_string()),
            ("num_classes".into(), self.num_classes.to_string()),
            ("dropout".into(), format!("{}", self.dropout)),
            ("image_size".into(), self.image_size.to_string()),
            ("text_len".into(), self.text_len.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("bn_momentum".into(), format!("{}", self.bn_momentum)),
            ("bn_epsilon".into(), format!("{}", self.bn_epsilon)),
        ]
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("config is missing key {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Format(format!("bad value for {key}")))
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|_| Error::Format(format!("bad value for {key}")))
        };
        let parse_vec = |key: &str| -> Result<Vec<usize>> {
            get(key)?
                .split(',')
                .map(|t| t.parse().map_err(|_| Error::Format(format!("bad value for {key}"))))
                .collect()
        };
        let config = ModelConfig {
            embed_dim: parse_usize("embed_dim")?,
            word_embed_dim: parse_usize("word_embed_dim")?,
            image_channels: parse_vec("image_channels")?,
            text_channels: parse_vec("text_channels")?,
            blocks_per_stage: parse_usize("blocks_per_stage")?,
            num_classes: parse_usize("num_classes")?,
            dropout: parse_f64("dropout")?,
            image_size: parse_usize("image_size")?,
            text_len: parse_usize("text_len")?,
            vocab_size: parse_usize("vocab_size")?,
            bn_momentum: parse_f64("bn_momentum")?,
            bn_epsilon: parse_f64("bn_epsilon")?,
        };
        config.validate()?;
        Ok(config)
    }

    /// Stable hash of the canonical form; checked when resuming training.
    pub fn hash(&self) -> u64 {
        let canon: String = self
            .kv_pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        hash_str(&canon)
    }
}

/// A named batch-norm layer: the affine parameters live in the `ParamSet`,
/// the running statistics here.
#[derive(Debug, Clone)]
pub struct BnEntry {
    pub name: String,
    pub state: BnState,
}

fn he_conv(params: &mut ParamSet, name: &str, cout: usize, cin: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> ParamId {
    let fan_in = (cin * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    let data = (0..cout * cin * kh * kw)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    params.register(name, Tensor::new(vec![cout, cin, kh, kw], data).expect("finite init"))
}

fn he_fc(params: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> (ParamId, ParamId) {
    let std = (2.0 / din as f64).sqrt();
    let data = (0..din * dout)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let w = params.register(&format!("{name}.w"), Tensor::new(vec![din, dout], data).expect("finite init"));
    let b = params.register(&format!("{name}.b"), Tensor::zeros(vec![dout]));
    (w, b)
}

fn new_bn(params: &mut ParamSet, bns: &mut Vec<BnEntry>, name: &str, channels: usize, config: &ModelConfig) -> usize {
    let state = BnState::new(params, name, channels, config.bn_momentum, config.bn_epsilon);
    bns.push(BnEntry { name: name.to_string(), state });
    bns.len() - 1
}

/// How a block bridges its input to its output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShortcutKind {
    /// Identity when shapes allow, projection otherwise.
    Auto,
    /// Plain pass-through; a configuration error if shapes differ.
    Identity,
    Projection,
}

/// conv-bn-relu-conv-bn plus a shortcut, then a trailing relu. The output
/// of an identity-shortcut block has its input's shape.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    conv1: ParamId,
    bn1: usize,
    conv2: ParamId,
    bn2: usize,
    proj: Option<(ParamId, usize)>,
    stride: (usize, usize),
    pad: Pad2,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        bns: &mut Vec<BnEntry>,
        config: &ModelConfig,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        pad: Pad2,
        stride: (usize, usize),
        shortcut: ShortcutKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let needs_projection = cin != cout || stride != (1, 1);
        let proj = match shortcut {
            ShortcutKind::Identity if needs_projection => {
                return Err(Error::Config(format!(
                    "block {name}: identity shortcut requested but input {cin}ch/stride {stride:?} does not match output {cout}ch"
                )));
            }
            ShortcutKind::Identity => None,
            ShortcutKind::Auto if !needs_projection => None,
            _ => {
                let conv = he_conv(params, &format!("{name}.proj.conv"), cout, cin, 1, 1, rng);
                let bn = new_bn(params, bns, &format!("{name}.proj.bn"), cout, config);
                Some((conv, bn))
            }
        };
        let conv1 = he_conv(params, &format!("{name}.conv1"), cout, cin, kernel.0, kernel.1, rng);
        let bn1 = new_bn(params, bns, &format!("{name}.bn1"), cout, config);
        let conv2 = he_conv(params, &format!("{name}.conv2"), cout, cout, kernel.0, kernel.1, rng);
        let bn2 = new_bn(params, bns, &format!("{name}.bn2"), cout, config);
        Ok(ResidualBlock { conv1, bn1, conv2, bn2, proj, stride, pad })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        bns: &mut [BnEntry],
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let k1 = g.param(params, self.conv1);
        let c1 = g.conv2d(x, k1, self.pad, self.stride)?;
        let b1 = bn_forward(g, params, bns, self.bn1, c1, mode)?;
        let r1 = g.relu(b1);
        let k2 = g.param(params, self.conv2);
        let c2 = g.conv2d(r1, k2, self.pad, (1, 1))?;
        let main = bn_forward(g, params, bns, self.bn2, c2, mode)?;
        let shortcut = match self.proj {
            None => x,
            Some((conv, bn)) => {
                let kp = g.param(params, conv);
                let cp = g.conv2d(x, kp, Pad2::none(), self.stride)?;
                bn_forward(g, params, bns, bn, cp, mode)?
            }
        };
        let sum = g.add(main, shortcut)?;
        Ok(g.relu(sum))
    }

    fn param_ids(&self, out: &mut Vec<ParamId>, bns: &[BnEntry]) {
        out.push(self.conv1);
        out.push(self.conv2);
        out.push(bns[self.bn1].state.gamma);
        out.push(bns[self.bn1].state.beta);
        out.push(bns[self.bn2].state.gamma);
        out.push(bns[self.bn2].state.beta);
        if let Some((conv, bn)) = self.proj {
            out.push(conv);
            out.push(bns[bn].state.gamma);
            out.push(bns[bn].state.beta);
        }
    }
}

fn bn_forward(
    g: &mut Graph,
    params: &ParamSet,
    bns: &mut [BnEntry],
    bn: usize,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let gamma = g.param(params, bns[bn].state.gamma);
    let beta = g.param(params, bns[bn].state.beta);
    g.batch_norm(x, gamma, beta, &mut bns[bn].state, mode)
}

#[derive(Debug, Clone)]
struct Stem {
    conv: ParamId,
    bn: usize,
}

#[derive(Debug, Clone)]
struct Backbone {
    stem: Option<Stem>,
    blocks: Vec<ResidualBlock>,
}

impl Backbone {
    fn param_ids(&self, bns: &[BnEntry]) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some(stem) = &self.stem {
            out.push(stem.conv);
            out.push(bns[stem.bn].state.gamma);
            out.push(bns[stem.bn].state.beta);
        }
        for b in &self.blocks {
            b.param_ids(&mut out, bns);
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Head {
    fc1_w: ParamId,
    fc1_b: ParamId,
    bn: usize,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// Features of one branch for one batch: `features` feeds the losses
/// (dropout applied in train mode), `clean` is the same computation with
/// dropout skipped, used for error bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct PathOutput {
    pub features: Var,
    pub clean: Var,
}

/// Parameter bundle for both CNN paths, both heads and the shared
/// classifier.
#[derive(Debug, Clone)]
pub struct DualPathModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    bns: Vec<BnEntry>,
    image_backbone: Backbone,
    image_head: Head,
    lookup_table: ParamId,
    text_backbone: Backbone,
    text_head: Head,
    w_share: ParamId,
}

impl DualPathModel {
    /// Build a freshly initialized model. `word_embedding` is the `[d, E]`
    /// first-layer kernel of the text path (random or from a table file).
    pub fn new(config: ModelConfig, word_embedding: Tensor, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if word_embedding.shape() != [config.vocab_size, config.word_embed_dim] {
            return Err(Error::Dimension(format!(
                "word embedding shape {:?} does not match config [{}, {}]",
                word_embedding.shape(),
                config.vocab_size,
                config.word_embed_dim
            )));
        }
        let mut params = ParamSet::new();
        let mut bns = Vec::new();

        // Image branch: stem conv + pool, then 3x3 stages.
        let ic = &config.image_channels;
        let stem_conv = he_conv(&mut params, "image.stem.conv", ic[0], 3, 3, 3, rng);
        let stem_bn = new_bn(&mut params, &mut bns, "image.stem.bn", ic[0], &config);
        let mut image_blocks = Vec::new();
        for (s, &cout) in ic.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let cin = if b == 0 {
                    if s == 0 { ic[0] } else { ic[s - 1] }
                } else {
                    cout
                };
                let stride = if s > 0 && b == 0 { (2, 2) } else { (1, 1) };
                image_blocks.push(ResidualBlock::new(
                    &mut params,
                    &mut bns,
                    &config,
                    &format!("image.s{s}.b{b}"),
                    cin,
                    cout,
                    (3, 3),
                    Pad2::symmetric(1, 1),
                    stride,
                    ShortcutKind::Auto,
                    rng,
                )?);
            }
        }
        let image_backbone = Backbone { stem: Some(Stem { conv: stem_conv, bn: stem_bn }), blocks: image_blocks };
        let image_head = Self::make_head(&mut params, &mut bns, &config, "image.head", *ic.last().unwrap(), rng);

        // Text branch: lookup table, then 1x2 stages along the length axis.
        let lookup_table = params.register("text.lookup", word_embedding);
        let tc = &config.text_channels;
        let mut text_blocks = Vec::new();
        for (s, &cout) in tc.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let cin = if b == 0 {
                    if s == 0 { config.word_embed_dim } else { tc[s - 1] }
                } else {
                    cout
                };
                let stride = if s > 0 && b == 0 { (1, 2) } else { (1, 1) };
                text_blocks.push(ResidualBlock::new(
                    &mut params,
                    &mut bns,
                    &config,
                    &format!("text.s{s}.b{b}"),
                    cin,
                    cout,
                    (1, 2),
                    Pad2::length_right(),
                    stride,
                    ShortcutKind::Auto,
                    rng,
                )?);
            }
        }
        let text_backbone = Backbone { stem: None, blocks: text_blocks };
        let text_head = Self::make_head(&mut params, &mut bns, &config, "text.head", *tc.last().unwrap(), rng);

        let std = (2.0 / config.embed_dim as f64).sqrt();
        let wdata = (0..config.embed_dim * config.num_classes)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w_share = params.register(
            "classifier.w",
            Tensor::new(vec![config.embed_dim, config.num_classes], wdata).expect("finite init"),
        );

        Ok(DualPathModel {
            config,
            params,
            bns,
            image_backbone,
            image_head,
            lookup_table,
            text_backbone,
            text_head,
            w_share,
        })
    }

    fn make_head(
        params: &mut ParamSet,
        bns: &mut Vec<BnEntry>,
        config: &ModelConfig,
        name: &str,
        cin: usize,
        rng: &mut ChaCha8Rng,
    ) -> Head {
        let (fc1_w, fc1_b) = he_fc(params, &format!("{name}.fc1"), cin, config.embed_dim, rng);
        let bn = new_bn(params, bns, &format!("{name}.bn"), config.embed_dim, config);
        let (fc2_w, fc2_b) = he_fc(params, &format!("{name}.fc2"), config.embed_dim, config.embed_dim, rng);
        Head { fc1_w, fc1_b, bn, fc2_w, fc2_b }
    }

    pub fn bn_entries(&self) -> &[BnEntry] {
        &self.bns
    }

    pub fn bn_entries_mut(&mut self) -> &mut Vec<BnEntry> {
        &mut self.bns
    }

    pub fn w_share(&self) -> ParamId {
        self.w_share
    }

    pub fn lookup_table(&self) -> ParamId {
        self.lookup_table
    }

    pub fn image_backbone_params(&self) -> Vec<ParamId> {
        self.image_backbone.param_ids(&self.bns)
    }

    pub fn image_head_params(&self) -> Vec<ParamId> {
        let h = &self.image_head;
        vec![
            h.fc1_w,
            h.fc1_b,
            self.bns[h.bn].state.gamma,
            self.bns[h.bn].state.beta,
            h.fc2_w,
            h.fc2_b,
        ]
    }

    pub fn text_params(&self) -> Vec<ParamId> {
        let mut out = vec![self.lookup_table];
        out.extend(self.text_backbone.param_ids(&self.bns));
        let h = &self.text_head;
        out.extend([
            h.fc1_w,
            h.fc1_b,
            self.bns[h.bn].state.gamma,
            self.bns[h.bn].state.beta,
            h.fc2_w,
            h.fc2_b,
        ]);
        out
    }

    pub fn set_image_backbone_frozen(&mut self, frozen: bool) {
        for id in self.image_backbone_params() {
            self.params.set_frozen(id, frozen);
        }
    }

    pub fn image_backbone_frozen(&self) -> bool {
        let ids = self.image_backbone_params();
        !ids.is_empty() && ids.iter().all(|id| self.params.get(*id).frozen)
    }

    /// Backbone of the image path: stem conv-bn-relu, 2x2 max pool, the
    /// residual stages, then global average pooling to `[N, C_last]`.
    ///
    /// A frozen backbone always runs its batch norms in eval mode, so its
    /// output is deterministic per image while the rest of the network
    /// trains.
    pub fn image_backbone_features(&mut self, g: &mut Graph, images: &Tensor, mode: Mode) -> Result<Var> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.config.image_size || shape[3] != self.config.image_size {
            return Err(Error::Dimension(format!(
                "image batch must be [N,3,{},{}], got {shape:?}",
                self.config.image_size, self.config.image_size
            )));
        }
        let bmode = if self.image_backbone_frozen() { Mode::Eval } else { mode };
        let x = g.input(images.clone());
        let stem = self.image_backbone.stem.clone().expect("image backbone has a stem");
        let k = g.param(&self.params, stem.conv);
        let c = g.conv2d(x, k, Pad2::symmetric(1, 1), (1, 1))?;
        let b = bn_forward(g, &self.params, &mut self.bns, stem.bn, c, bmode)?;
        let r = g.relu(b);
        let mut cur = g.pool2d(r, (2, 2), crate::autograd::PoolKind::Max)?;
        let blocks = self.image_backbone.blocks.clone();
        for block in &blocks {
            cur = block.forward(g, &self.params, &mut self.bns, cur, bmode)?;
        }
        g.global_avg_pool(cur)
    }

    /// Image head on pooled backbone features.
    pub fn image_head_forward(
        &mut self,
        g: &mut Graph,
        pooled: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<PathOutput> {
        let head = self.image_head.clone();
        self.head_forward(g, &head, pooled, mode, rng)
    }

    /// Full image path: `f_img = image_head(image_backbone(I))`.
    pub fn image_forward(
        &mut self,
        g: &mut Graph,
        images: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<PathOutput> {
        let pooled = self.image_backbone_features(g, images, mode)?;
        self.image_head_forward(g, pooled, mode, rng)
    }

    /// Full text path: lookup, 1x2 residual stages, global average pooling
    /// over the length axis, then the text head.
    pub fn text_forward(
        &mut self,
        g: &mut Graph,
        codes: &[TextCode],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<PathOutput> {
        if codes.is_empty() {
            return Err(Error::Data("text batch is empty".into()));
        }
        let len = self.config.text_len;
        let mut slots = Vec::with_capacity(codes.len() * len);
        for code in codes {
            if code.len() != len {
                return Err(Error::Dimension(format!(
                    "text code length {} does not match config text_len {len}",
                    code.len()
                )));
            }
            slots.extend_from_slice(code.slots());
        }
        let table = g.param(&self.params, self.lookup_table);
        let mut cur = g.lookup(table, &slots, codes.len(), len)?;
        let blocks = self.text_backbone.blocks.clone();
        for block in &blocks {
            cur = block.forward(g, &self.params, &mut self.bns, cur, mode)?;
        }
        let pooled = g.global_avg_pool(cur)?;
        let head = self.text_head.clone();
        self.head_forward(g, &head, pooled, mode, rng)
    }

    fn head_forward(
        &mut self,
        g: &mut Graph,
        head: &Head,
        pooled: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<PathOutput> {
        let w1 = g.param(&self.params, head.fc1_w);
        let b1 = g.param(&self.params, head.fc1_b);
        let fc1 = g.linear(pooled, w1, b1)?;
        let bn = bn_forward(g, &self.params, &mut self.bns, head.bn, fc1, mode)?;
        let pre = g.relu(bn);
        let w2 = g.param(&self.params, head.fc2_w);
        let b2 = g.param(&self.params, head.fc2_b);
        let dropped = g.dropout(pre, self.config.dropout, mode, rng)?;
        let features = g.linear(dropped, w2, b2)?;
        let clean = if dropped == pre {
            features
        } else {
            g.linear(pre, w2, b2)?
        };
        Ok(PathOutput { features, clean })
    }

    /// Class logits `features @ W_share` (bias-free).
    pub fn classify(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let w = g.param(&self.params, self.w_share);
        g.matmul(features, w)
    }

    /// Classifier leaf shared between calls, so both modalities pull on the
    /// same weight within one graph.
    pub fn w_share_var(&self, g: &mut Graph) -> Var {
        g.param(&self.params, self.w_share)
    }
}

/// Stack `[3,H,W]` images into one `[N,3,H,W]` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Data("image batch is empty".into()));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("expected [C,H,W] images, got {shape:?}")));
    }
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "cannot stack images of shapes {:?} and {shape:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data)
}

#[cfg(test)]
mod tests;
