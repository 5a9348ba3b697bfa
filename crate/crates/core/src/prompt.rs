//! Prompt pool, key-query scoring and vector-quantized prompt selection.
//!
//! A query `q` is scored against the keys `K` (`α = softmax(Kq / τ)`), the
//! scores mix the pool into a continuous prompt `p' = Σ α_i P_i`, and `p'` is
//! snapped to its nearest pool element `P_k`. The snapped prompt is wired
//! through a straight-through connector so the task loss reaches `p'` (and
//! through it `K` and `P`) unchanged. Two regularizers keep the codebook and
//! the continuous prompt close:
//!
//! - codebook loss `‖sg[p'] − P_k‖²`, which only moves `P_k`;
//! - commitment loss `‖p' − sg[P_k]‖²`, which only moves `p'`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::backbone::{features, FrozenBackbone};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::tensor::{checksum_all, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    /// Codebook `[N, L_p, D]`.
    pub pool: Tensor,
    /// Keys `[N, D]`.
    pub keys: Tensor,
}

/// Graph handles for a bound [`PromptPool`].
#[derive(Clone, Copy, Debug)]
pub struct PoolVars {
    pub pool: Var,
    pub keys: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptSelection {
    pub alpha: Tensor,
    pub p_continuous: Tensor,
    pub p_quantized: Tensor,
    pub index: usize,
}

impl PromptPool {
    /// Pool and keys drawn uniform(-1/√D, 1/√D).
    pub fn init(size: usize, prompt_len: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::contract("prompt pool needs at least one element of positive width"));
        }
        if !prompt_len.is_multiple_of(2) {
            return Err(Error::contract(format!("prompt length {prompt_len} must be even")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            pool: Tensor::uniform(vec![size, prompt_len, dim], bound, rng).with_requires_grad(true),
            keys: Tensor::uniform(vec![size, dim], bound, rng).with_requires_grad(true),
        })
    }

    pub fn from_parts(pool: Tensor, keys: Tensor) -> Result<Self> {
        let (ps, ks) = (pool.shape(), keys.shape());
        if ps.len() != 3 || ks.len() != 2 || ps[0] != ks[0] || ps[2] != ks[1] {
            return Err(Error::dim(format!("pool {ps:?} and keys {ks:?} do not fit together")));
        }
        if ps[1] % 2 != 0 {
            return Err(Error::contract(format!("prompt length {} must be even", ps[1])));
        }
        Ok(Self {
            pool: pool.with_requires_grad(true),
            keys: keys.with_requires_grad(true),
        })
    }

    pub fn size(&self) -> usize {
        self.pool.shape()[0]
    }

    pub fn prompt_len(&self) -> usize {
        self.pool.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.pool.shape()[2]
    }

    /// Element `i` of the codebook as an `[L_p, D]` tensor.
    pub fn element(&self, i: usize) -> Tensor {
        Tensor::new(vec![self.prompt_len(), self.dim()], self.pool.row(i).to_vec())
            .expect("pool rows are L_p x D")
    }

    pub fn checksum(&self) -> u64 {
        checksum_all([&self.pool, &self.keys])
    }

    pub fn bind(&self, graph: &mut Graph) -> PoolVars {
        PoolVars {
            pool: graph.param(&self.pool),
            keys: graph.param(&self.keys),
        }
    }

    pub fn accumulate_grads(&mut self, graph: &Graph, vars: &PoolVars) -> Result<()> {
        if let Some(g) = graph.grad(vars.pool) {
            self.pool.accumulate_grad(g)?;
        }
        if let Some(g) = graph.grad(vars.keys) {
            self.keys.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.pool, &mut self.keys]
    }

    /// Runs scoring, aggregation and quantization for one query without
    /// tracking gradients.
    pub fn select(&self, query: &Tensor, temperature: f64) -> Result<PromptSelection> {
        let mut graph = Graph::new();
        let pool = graph.constant(self.pool.clone());
        let keys = graph.constant(self.keys.clone());
        let q = graph.constant(query.clone());
        let alpha = similarity_scores(&mut graph, keys, q, temperature)?;
        let p_cont = aggregate_prompt(&mut graph, pool, alpha)?;
        let quantized = quantize_prompt(&mut graph, pool, p_cont)?;
        Ok(PromptSelection {
            alpha: graph.value(alpha).clone(),
            p_continuous: graph.value(p_cont).clone(),
            p_quantized: graph.value(quantized.output).clone(),
            index: quantized.indices[0],
        })
    }
}

/// Query of one `[L-1, token_dim]` input: the class feature of the frozen
/// backbone run without prompts.
pub fn compute_query(backbone: &FrozenBackbone, tokens: &Tensor) -> Result<Tensor> {
    if !backbone.is_frozen() {
        return Err(Error::contract("queries require a frozen backbone"));
    }
    backbone.encode(tokens, &BTreeMap::new())
}

/// Queries for every sample of `dataset`, `[N, D]`.
pub fn compute_queries(backbone: &FrozenBackbone, dataset: &TaskDataset) -> Result<Tensor> {
    if !backbone.is_frozen() {
        return Err(Error::contract("queries require a frozen backbone"));
    }
    features(backbone, dataset, None, 64)
}

/// `softmax(K q / τ)` for a query `[D]` or a batch of queries `[B, D]`;
/// returns `[N]` or `[B, N]`.
pub fn similarity_scores(graph: &mut Graph, keys: Var, query: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
    }
    let qs = graph.shape(query).to_vec();
    let (q, single) = match qs.len() {
        1 => (graph.reshape(query, &[1, qs[0]])?, true),
        2 => (query, false),
        _ => return Err(Error::dim(format!("query must be [D] or [B, D], got {qs:?}"))),
    };
    let kt = graph.transpose(keys)?;
    let logits = graph.matmul(q, kt)?;
    let logits = if temperature == 1.0 {
        logits
    } else {
        graph.scale(logits, 1.0 / temperature)?
    };
    let alpha = graph.softmax(logits, 1)?;
    if single {
        let n = graph.shape(alpha)[1];
        graph.reshape(alpha, &[n])
    } else {
        Ok(alpha)
    }
}

/// `p' = Σ_i α_i P_i`; `alpha` is `[N]` or `[B, N]`, the result `[L_p, D]`
/// or `[B, L_p, D]`.
pub fn aggregate_prompt(graph: &mut Graph, pool: Var, alpha: Var) -> Result<Var> {
    let ps = graph.shape(pool).to_vec();
    let s = graph.shape(alpha).to_vec();
    let (a, single) = match s.len() {
        1 => (graph.reshape(alpha, &[1, s[0]])?, true),
        2 => (alpha, false),
        _ => return Err(Error::dim(format!("scores must be [N] or [B, N], got {s:?}"))),
    };
    if ps.len() != 3 || *s.last().unwrap() != ps[0] {
        return Err(Error::dim(format!("{} scores for a pool of shape {ps:?}", s.last().unwrap())));
    }
    let flat = graph.reshape(pool, &[ps[0], ps[1] * ps[2]])?;
    let mixed = graph.matmul(a, flat)?;
    if single {
        graph.reshape(mixed, &[ps[1], ps[2]])
    } else {
        let b = graph.shape(a)[0];
        graph.reshape(mixed, &[b, ps[1], ps[2]])
    }
}

/// Index of the codebook row closest to `p` in Euclidean distance; the
/// lowest index wins ties.
pub fn nearest_index(codebook: &[f64], width: usize, p: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, row) in codebook.chunks_exact(width).enumerate() {
        let d: f64 = row.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

#[derive(Clone, Debug)]
pub struct Quantized {
    /// Selected element with gradients routed to the continuous prompt.
    pub output: Var,
    /// The raw selected element(s) `P_k`, differentiable w.r.t. the pool.
    pub selected: Var,
    pub indices: Vec<usize>,
}

/// Nearest-neighbour look-up of `p_cont` (`[L_p, D]` or `[B, L_p, D]`) in the
/// pool, wired as `straight_through(P_k, p_cont)`.
pub fn quantize_prompt(graph: &mut Graph, pool: Var, p_cont: Var) -> Result<Quantized> {
    let ps = graph.shape(pool).to_vec();
    let cs = graph.shape(p_cont).to_vec();
    if ps.len() != 3 || !(cs.ends_with(&ps[1..]) && (cs.len() == 2 || cs.len() == 3)) {
        return Err(Error::dim(format!("prompt {cs:?} does not match pool {ps:?}")));
    }
    let width = ps[1] * ps[2];
    let indices: Vec<usize> = graph
        .data(p_cont)
        .chunks_exact(width)
        .map(|p| nearest_index(graph.data(pool), width, p))
        .collect();
    let selected = graph.index_select(pool, &indices)?;
    let selected = if cs.len() == 2 {
        graph.reshape(selected, &cs)?
    } else {
        selected
    };
    let output = graph.straight_through(selected, p_cont)?;
    Ok(Quantized {
        output,
        selected,
        indices,
    })
}

fn batch_mean_squared(graph: &mut Graph, diff: Var) -> Result<Var> {
    let s = graph.shape(diff).to_vec();
    let batch = if s.len() == 3 { s[0] } else { 1 };
    let total = graph.squared_norm(diff)?;
    if batch == 1 {
        Ok(total)
    } else {
        graph.scale(total, 1.0 / batch as f64)
    }
}

/// `‖sg[p'] − P_k‖²`, averaged over the batch. Only the codebook receives
/// gradient.
pub fn vq_loss(graph: &mut Graph, p_cont: Var, selected: Var) -> Result<Var> {
    if graph.shape(p_cont) != graph.shape(selected) {
        return Err(Error::dim(format!(
            "vq loss shapes differ: {:?} vs {:?}",
            graph.shape(p_cont),
            graph.shape(selected)
        )));
    }
    let fixed = graph.stop_gradient(p_cont)?;
    let diff = graph.sub(fixed, selected)?;
    batch_mean_squared(graph, diff)
}

/// `‖p' − sg[P_k]‖²`, averaged over the batch. Only the continuous prompt
/// receives gradient.
pub fn commitment_loss(graph: &mut Graph, p_cont: Var, selected: Var) -> Result<Var> {
    if graph.shape(p_cont) != graph.shape(selected) {
        return Err(Error::dim(format!(
            "commitment loss shapes differ: {:?} vs {:?}",
            graph.shape(p_cont),
            graph.shape(selected)
        )));
    }
    let fixed = graph.stop_gradient(selected)?;
    let diff = graph.sub(p_cont, fixed)?;
    batch_mean_squared(graph, diff)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_q: f64,
    pub lambda_c: f64,
}

impl LossWeights {
    pub fn new(lambda_q: f64, lambda_c: f64) -> Result<Self> {
        if !(lambda_q >= 0.0 && lambda_c >= 0.0) {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        Ok(Self { lambda_q, lambda_c })
    }

    pub fn combine(&self, ce: f64, vq: f64, commit: f64) -> f64 {
        ce + self.lambda_q * vq + self.lambda_c * commit
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_q: 0.4,
            lambda_c: 0.1,
        }
    }
}

/// `L_CE + λ_q L_VQ + λ_c L_Commit` on graph scalars.
pub fn total_loss(graph: &mut Graph, ce: Var, vq: Var, commit: Var, weights: LossWeights) -> Result<Var> {
    let vq = graph.scale(vq, weights.lambda_q)?;
    let commit = graph.scale(commit, weights.lambda_c)?;
    let partial = graph.add(ce, vq)?;
    graph.add(partial, commit)
}

/// Continuous prompt used directly, without quantization.
pub fn soft_prompt_forward(graph: &mut Graph, vars: &PoolVars, query: Var, temperature: f64) -> Result<Var> {
    let alpha = similarity_scores(graph, vars.keys, query, temperature)?;
    aggregate_prompt(graph, vars.pool, alpha)
}
