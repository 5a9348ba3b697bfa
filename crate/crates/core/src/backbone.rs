//! A small pre-LN transformer encoder with a class token and prefix-tuning
//! injection points.
//!
//! Blocks compute `x + MSA(LN(x))` followed by `x + FFN(LN(x))` with a tanh
//! feed-forward layer. A prompt `p` of even length `L_p` is split along the
//! sequence axis into key and value prefixes that are prepended to the
//! attention keys and values only, so the output keeps the input length.

use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::{checksum_all, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Sequence length including the class token.
    pub seq_len: usize,
    pub d_ff: usize,
    /// Width of an input token before embedding.
    pub token_dim: usize,
    pub prompt_blocks: Vec<usize>,
}

impl BackboneConfig {
    /// Prompted blocks used when none are given: the first five, or every
    /// block of a shallower encoder.
    pub fn default_prompt_blocks(depth: usize) -> Vec<usize> {
        (0..depth.min(5)).collect()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn content_len(&self) -> usize {
        self.seq_len - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 || self.token_dim == 0 {
            return Err(Error::contract("backbone dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::contract("sequence needs the class token and at least one content token"));
        }
        if let Some(b) = self.prompt_blocks.iter().find(|&&b| b >= self.depth) {
            return Err(Error::contract(format!("prompt block {b} outside depth {}", self.depth)));
        }
        Ok(())
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            d_model: 64,
            heads: 4,
            seq_len: 17,
            d_ff: 128,
            token_dim: 32,
            prompt_blocks: vec![0, 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsaBlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
}

fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0 / (fan_in as f64).sqrt(), rng).with_requires_grad(true)
}

impl MsaBlockParams {
    pub fn init(d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_q: init_uniform(&[d, d], d, rng),
            w_k: init_uniform(&[d, d], d, rng),
            w_v: init_uniform(&[d, d], d, rng),
            w_o: init_uniform(&[d, d], d, rng),
            ln1_gamma: Tensor::filled(vec![d], 1.0).with_requires_grad(true),
            ln1_beta: Tensor::zeros(vec![d]).with_requires_grad(true),
            ln2_gamma: Tensor::filled(vec![d], 1.0).with_requires_grad(true),
            ln2_beta: Tensor::zeros(vec![d]).with_requires_grad(true),
            ff_w1: init_uniform(&[d, d_ff], d, rng),
            ff_b1: init_uniform(&[d_ff], d, rng),
            ff_w2: init_uniform(&[d_ff, d], d_ff, rng),
            ff_b2: init_uniform(&[d], d_ff, rng),
        }
    }

    /// Parameters with their names, in declaration order.
    pub fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("ff_w1", &self.ff_w1),
            ("ff_b1", &self.ff_b1),
            ("ff_w2", &self.ff_w2),
            ("ff_b2", &self.ff_b2),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 12] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
            ("ff_w1", &mut self.ff_w1),
            ("ff_b1", &mut self.ff_b1),
            ("ff_w2", &mut self.ff_w2),
            ("ff_b2", &mut self.ff_b2),
        ]
    }

    pub fn bind(&self, graph: &mut Graph) -> BlockVars {
        BlockVars {
            w_q: graph.param(&self.w_q),
            w_k: graph.param(&self.w_k),
            w_v: graph.param(&self.w_v),
            w_o: graph.param(&self.w_o),
            ln1_gamma: graph.param(&self.ln1_gamma),
            ln1_beta: graph.param(&self.ln1_beta),
            ln2_gamma: graph.param(&self.ln2_gamma),
            ln2_beta: graph.param(&self.ln2_beta),
            ff_w1: graph.param(&self.ff_w1),
            ff_b1: graph.param(&self.ff_b1),
            ff_w2: graph.param(&self.ff_w2),
            ff_b2: graph.param(&self.ff_b2),
        }
    }
}

/// Graph handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
}

impl BlockVars {
    fn in_order(&self) -> [Var; 12] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ln1_gamma,
            self.ln1_beta,
            self.ln2_gamma,
            self.ln2_beta,
            self.ff_w1,
            self.ff_b1,
            self.ff_w2,
            self.ff_b2,
        ]
    }
}

/// Applies `x·w` to every row of a `[b, l, d]` tensor.
fn project(graph: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let s = graph.shape(x).to_vec();
    let flat = graph.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = graph.matmul(flat, w)?;
    let out = graph.shape(w)[1];
    graph.reshape(y, &[s[0], s[1], out])
}

/// `[b, l, d]` -> `[b * heads, l, d / heads]`.
fn split_heads(graph: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = graph.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = graph.reshape(x, &[b, l, heads, d / heads])?;
    let x = graph.permute(x, &[0, 2, 1, 3])?;
    graph.reshape(x, &[b * heads, l, d / heads])
}

fn merge_heads(graph: &mut Graph, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = graph.shape(x).to_vec();
    let (l, dh) = (s[1], s[2]);
    let x = graph.reshape(x, &[batch, heads, l, dh])?;
    let x = graph.permute(x, &[0, 2, 1, 3])?;
    graph.reshape(x, &[batch, l, heads * dh])
}

fn as_batched(graph: &mut Graph, x: Var) -> Result<(Var, bool)> {
    match graph.shape(x).len() {
        3 => Ok((x, false)),
        2 => {
            let s = graph.shape(x).to_vec();
            Ok((graph.reshape(x, &[1, s[0], s[1]])?, true))
        }
        _ => Err(Error::dim(format!(
            "attention inputs must be [L, D] or [B, L, D], got {:?}",
            graph.shape(x)
        ))),
    }
}

/// Multi-head scaled dot-product attention with output projection.
///
/// Accepts `[L, D]` or batched `[B, L, D]` inputs; `h_k` and `h_v` must share
/// their sequence length. The output has `h_q`'s shape.
pub fn msa_forward(graph: &mut Graph, h_q: Var, h_k: Var, h_v: Var, block: &BlockVars, heads: usize) -> Result<Var> {
    let (q_in, unbatched) = as_batched(graph, h_q)?;
    let (k_in, _) = as_batched(graph, h_k)?;
    let (v_in, _) = as_batched(graph, h_v)?;
    let (sq, sk, sv) = (
        graph.shape(q_in).to_vec(),
        graph.shape(k_in).to_vec(),
        graph.shape(v_in).to_vec(),
    );
    let d = graph.shape(block.w_q)[0];
    if sq[2] != d || sk[2] != d || sv[2] != d {
        return Err(Error::dim(format!(
            "attention expects embedding dim {d}, got {sq:?}, {sk:?}, {sv:?}"
        )));
    }
    if sk[..2] != sv[..2] || sq[0] != sk[0] {
        return Err(Error::dim(format!(
            "keys {sk:?} and values {sv:?} must match each other and the query batch"
        )));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::dim(format!("{d} is not divisible into {heads} heads")));
    }
    let batch = sq[0];
    let q = project(graph, q_in, block.w_q)?;
    let k = project(graph, k_in, block.w_k)?;
    let v = project(graph, v_in, block.w_v)?;
    let q = split_heads(graph, q, heads)?;
    let k = split_heads(graph, k, heads)?;
    let v = split_heads(graph, v, heads)?;
    let scores = graph.bmm_transposed(q, k)?;
    let scores = graph.scale(scores, 1.0 / ((d / heads) as f64).sqrt())?;
    let attn = graph.softmax(scores, 2)?;
    let ctx = graph.bmm(attn, v)?;
    let ctx = merge_heads(graph, ctx, batch, heads)?;
    let out = project(graph, ctx, block.w_o)?;
    if unbatched {
        let s = graph.shape(out).to_vec();
        graph.reshape(out, &[s[1], s[2]])
    } else {
        Ok(out)
    }
}

fn prefixed_attention(graph: &mut Graph, prompt: Var, h_q: Var, h: Var, block: &BlockVars, heads: usize) -> Result<Var> {
    let (p, _) = as_batched(graph, prompt)?;
    let (hq, unbatched) = as_batched(graph, h_q)?;
    let (hb, _) = as_batched(graph, h)?;
    let lp = graph.shape(p)[1];
    if !lp.is_multiple_of(2) {
        return Err(Error::contract(format!("prompt length {lp} must be even")));
    }
    if graph.shape(p)[0] != graph.shape(hb)[0] || graph.shape(p)[2] != graph.shape(hb)[2] {
        return Err(Error::dim(format!(
            "prompt {:?} does not match hidden states {:?}",
            graph.shape(p),
            graph.shape(hb)
        )));
    }
    let half = lp / 2;
    let p_k = graph.narrow(p, 1, 0, half)?;
    let p_v = graph.narrow(p, 1, half, half)?;
    let keys = graph.concat(&[p_k, hb], 1)?;
    let values = graph.concat(&[p_v, hb], 1)?;
    let out = msa_forward(graph, hq, keys, values, block, heads)?;
    if unbatched {
        let s = graph.shape(out).to_vec();
        graph.reshape(out, &[s[1], s[2]])
    } else {
        Ok(out)
    }
}

/// Prefix-tuned attention `MSA(h, [p_K; h], [p_V; h])`, where `p_K` and
/// `p_V` are the first and second halves of `p` along the sequence axis.
pub fn prefix_tuned_msa(graph: &mut Graph, p: Var, h: Var, block: &BlockVars, heads: usize) -> Result<Var> {
    prefixed_attention(graph, p, h, h, block, heads)
}

fn feed_forward(graph: &mut Graph, x: Var, block: &BlockVars) -> Result<Var> {
    let h = project(graph, x, block.ff_w1)?;
    let h = graph.add_bias(h, block.ff_b1)?;
    let h = graph.tanh(h)?;
    let h = project(graph, h, block.ff_w2)?;
    graph.add_bias(h, block.ff_b2)
}

/// One encoder block over `[B, L, D]`. With `class_only` the block returns
/// just the updated class token, `[B, 1, D]`; keys and values still span the
/// full sequence.
fn block_forward(
    graph: &mut Graph,
    x: Var,
    prompt: Option<Var>,
    block: &BlockVars,
    heads: usize,
    class_only: bool,
) -> Result<Var> {
    let h = graph.layer_norm(x, block.ln1_gamma, block.ln1_beta)?;
    let (h_q, residual) = if class_only {
        (graph.narrow(h, 1, 0, 1)?, graph.narrow(x, 1, 0, 1)?)
    } else {
        (h, x)
    };
    let attn = match prompt {
        Some(p) => prefixed_attention(graph, p, h_q, h, block, heads)?,
        None => msa_forward(graph, h_q, h, h, block, heads)?,
    };
    let x = graph.add(residual, attn)?;
    let h = graph.layer_norm(x, block.ln2_gamma, block.ln2_beta)?;
    let f = feed_forward(graph, h, block)?;
    graph.add(x, f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    pub config: BackboneConfig,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub cls_token: Tensor,
    pub blocks: Vec<MsaBlockParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    frozen: bool,
}

/// Graph handles for a whole backbone.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub cls_token: Var,
    pub blocks: Vec<BlockVars>,
    pub norm_gamma: Var,
    pub norm_beta: Var,
}

impl BackboneVars {
    fn in_order(&self) -> Vec<Var> {
        let mut out = vec![self.embed_w, self.embed_b, self.cls_token];
        for b in &self.blocks {
            out.extend(b.in_order());
        }
        out.extend([self.norm_gamma, self.norm_beta]);
        out
    }
}

impl FrozenBackbone {
    /// Randomly initialised, trainable backbone.
    pub fn init(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed_w = init_uniform(&[config.token_dim, d], config.token_dim, rng);
        let embed_b = init_uniform(&[d], config.token_dim, rng);
        let cls_token = init_uniform(&[d], d, rng);
        let blocks = (0..config.depth).map(|_| MsaBlockParams::init(d, config.d_ff, rng)).collect();
        Ok(Self {
            config,
            embed_w,
            embed_b,
            cls_token,
            blocks,
            norm_gamma: Tensor::filled(vec![d], 1.0).with_requires_grad(true),
            norm_beta: Tensor::zeros(vec![d]).with_requires_grad(true),
            frozen: false,
        })
    }

    /// Rebuilds a backbone from named parameters as produced by
    /// [`FrozenBackbone::named_parameters`].
    pub fn from_parameters(config: BackboneConfig, mut params: BTreeMap<String, Tensor>, frozen: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut backbone = Self::init(config, &mut rng)?;
        for (name, slot) in backbone.named_parameters_mut() {
            let t = params
                .remove(&name)
                .ok_or_else(|| Error::contract(format!("missing backbone parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.with_requires_grad(true);
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::contract(format!("unexpected backbone parameter {extra}")));
        }
        if frozen {
            backbone.freeze();
        }
        Ok(backbone)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter as constant. Irreversible.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for (_, t) in self.named_parameters_mut() {
            t.set_requires_grad(false);
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.w".to_string(), &self.embed_w),
            ("embed.b".to_string(), &self.embed_b),
            ("cls_token".to_string(), &self.cls_token),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("norm.gamma".to_string(), &self.norm_gamma));
        out.push(("norm.beta".to_string(), &self.norm_beta));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("embed.w".to_string(), &mut self.embed_w),
            ("embed.b".to_string(), &mut self.embed_b),
            ("cls_token".to_string(), &mut self.cls_token),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("norm.gamma".to_string(), &mut self.norm_gamma));
        out.push(("norm.beta".to_string(), &mut self.norm_beta));
        out
    }

    pub fn checksum(&self) -> u64 {
        checksum_all(self.named_parameters().into_iter().map(|(_, t)| t))
    }

    pub fn bind(&self, graph: &mut Graph) -> BackboneVars {
        BackboneVars {
            embed_w: graph.param(&self.embed_w),
            embed_b: graph.param(&self.embed_b),
            cls_token: graph.param(&self.cls_token),
            blocks: self.blocks.iter().map(|b| b.bind(graph)).collect(),
            norm_gamma: graph.param(&self.norm_gamma),
            norm_beta: graph.param(&self.norm_beta),
        }
    }

    /// Class-token features for a `[B, L-1, token_dim]` batch.
    ///
    /// `prompts` maps block index to a `[B, L_p, D]` prompt; every key must be
    /// one of the configured prompt blocks.
    pub fn encode_batch(
        &self,
        graph: &mut Graph,
        vars: &BackboneVars,
        tokens: Var,
        prompts: &BTreeMap<usize, Var>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if let Some(b) = prompts.keys().find(|b| !cfg.prompt_blocks.contains(b)) {
            return Err(Error::contract(format!("block {b} does not accept prompts")));
        }
        let s = graph.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != cfg.content_len() || s[2] != cfg.token_dim {
            return Err(Error::dim(format!(
                "expected tokens [B, {}, {}], got {s:?}",
                cfg.content_len(),
                cfg.token_dim
            )));
        }
        let batch = s[0];
        let embedded = project(graph, tokens, vars.embed_w)?;
        let embedded = graph.add_bias(embedded, vars.embed_b)?;
        let cls = graph.reshape(vars.cls_token, &[1, cfg.d_model])?;
        let cls = graph.tile(cls, batch)?;
        let mut x = graph.concat(&[cls, embedded], 1)?;
        for (i, block) in vars.blocks.iter().enumerate() {
            let last = i + 1 == vars.blocks.len();
            x = block_forward(graph, x, prompts.get(&i).copied(), block, cfg.heads, last)?;
        }
        let x = graph.reshape(x, &[batch, cfg.d_model])?;
        graph.layer_norm(x, vars.norm_gamma, vars.norm_beta)
    }

    /// Single-sample convenience over [`FrozenBackbone::encode_batch`]:
    /// `x` is `[L-1, token_dim]`, prompts are `[L_p, D]`.
    pub fn encode(&self, x: &Tensor, prompts: &BTreeMap<usize, Tensor>) -> Result<Tensor> {
        let mut graph = Graph::new();
        let vars = self.bind(&mut graph);
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let tokens = graph.constant(x.clone().reshape(shape)?);
        let mut pv = BTreeMap::new();
        for (&b, p) in prompts {
            let mut shape = vec![1];
            shape.extend_from_slice(p.shape());
            pv.insert(b, graph.constant(p.clone().reshape(shape)?));
        }
        let out = self.encode_batch(&mut graph, &vars, tokens, &pv)?;
        graph.value(out).clone().reshape(vec![self.config.d_model])
    }

    /// Writes gradients recorded on `graph` into the parameter tensors.
    pub fn accumulate_grads(&mut self, graph: &Graph, vars: &BackboneVars) -> Result<()> {
        let handles = vars.in_order();
        for ((_, t), v) in self.named_parameters_mut().into_iter().zip(handles) {
            if let Some(g) = graph.grad(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            learning_rate: 0.002,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Class-token features for every sample of `dataset`, in order.
pub fn features(backbone: &FrozenBackbone, dataset: &TaskDataset, prompts: Option<&Tensor>, batch_size: usize) -> Result<Tensor> {
    let d = backbone.config.d_model;
    let mut out = Vec::with_capacity(dataset.len() * d);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut graph = Graph::new();
        let vars = backbone.bind(&mut graph);
        let tokens = graph.constant(dataset.batch_tokens(chunk));
        let mut map = BTreeMap::new();
        if let Some(p) = prompts {
            let pv = graph.constant(p.clone());
            let pv = graph.tile(pv, chunk.len())?;
            for &b in &backbone.config.prompt_blocks {
                map.insert(b, pv);
            }
        }
        let f = backbone.encode_batch(&mut graph, &vars, tokens, &map)?;
        out.extend_from_slice(graph.data(f));
    }
    Tensor::new(vec![dataset.len(), d], out)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Trains a fresh backbone together with a temporary linear head on
/// `train`, discards the head and freezes the backbone.
///
/// With `epochs == 0` the randomly initialised backbone is frozen as is.
pub fn pretrain_backbone(
    train: &TaskDataset,
    test: Option<&TaskDataset>,
    config: BackboneConfig,
    pretrain: &PretrainConfig,
) -> Result<(FrozenBackbone, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::contract("pretraining dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pretrain.seed);
    let mut backbone = FrozenBackbone::init(config, &mut rng)?;
    let classes: Vec<u32> = train.labels().into_iter().collect();
    let dense = |label: u32| classes.binary_search(&label).ok();
    let targets: Vec<usize> = train
        .samples
        .iter()
        .map(|s| dense(s.label).expect("label drawn from the same set"))
        .collect();
    let d = backbone.config.d_model;
    let mut head_w = init_uniform(&[d, classes.len()], d, &mut rng);
    let mut head_b = Tensor::zeros(vec![classes.len()]).with_requires_grad(true);
    let active = vec![true; classes.len()];

    let batch_size = pretrain.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(batch_size);
    let schedule = CosineSchedule::new(pretrain.learning_rate, steps_per_epoch * pretrain.epochs);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(pretrain.epochs);
    let mut step = 0;
    for epoch in 0..pretrain.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let mut graph = Graph::new();
            let vars = backbone.bind(&mut graph);
            let hw = graph.param(&head_w);
            let hb = graph.param(&head_b);
            let tokens = graph.constant(train.batch_tokens(chunk));
            let feats = backbone.encode_batch(&mut graph, &vars, tokens, &BTreeMap::new())?;
            let logits = graph.matmul(feats, hw)?;
            let logits = graph.add_bias(logits, hb)?;
            let batch_targets: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let loss = graph.masked_cross_entropy(logits, &batch_targets, &active)?;
            graph.backward(loss)?;
            total += graph.value(loss).item()? * chunk.len() as f64;

            backbone.accumulate_grads(&graph, &vars)?;
            head_w.accumulate_grad(&graph.grad_or_zeros(hw))?;
            head_b.accumulate_grad(&graph.grad_or_zeros(hb))?;
            let mut params: Vec<&mut Tensor> = backbone
                .named_parameters_mut()
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            params.push(&mut head_w);
            params.push(&mut head_b);
            opt.step(&mut params, schedule.rate(step));
            step += 1;
        }
        let mean = total / train.len() as f64;
        info!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    backbone.freeze();

    let accuracy = |ds: &TaskDataset| -> Result<f64> {
        let feats = features(&backbone, ds, None, 64)?;
        let mut correct = 0usize;
        for (i, s) in ds.samples.iter().enumerate() {
            let f = feats.row(i);
            let logits: Vec<f64> = (0..classes.len())
                .map(|c| head_b.data()[c] + (0..d).map(|j| f[j] * head_w.data()[j * classes.len() + c]).sum::<f64>())
                .collect();
            if Some(argmax(&logits)) == dense(s.label) {
                correct += 1;
            }
        }
        Ok(correct as f64 / ds.len().max(1) as f64)
    };
    let report = PretrainReport {
        epoch_losses,
        train_accuracy: accuracy(train)?,
        test_accuracy: test.map(accuracy).transpose()?,
    };
    Ok((backbone, report))
}
