//! Class-incremental training over a frozen backbone.
//!
//! Each task trains the prompt pool, keys and a single global classifier with
//! cross-entropy restricted to the task's own classes. Afterwards the
//! prompted features of the task's training data are summarised as diagonal
//! Gaussians, and the classifier is fine-tuned on pseudo features drawn from
//! every class seen so far to undo the bias towards recent tasks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::FrozenBackbone;
use crate::data::{TaskDataset, TaskSequence};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, AccuracyMatrix};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::prompt::{
    aggregate_prompt, commitment_loss, compute_queries, quantize_prompt, similarity_scores, total_loss, vq_loss,
    LossWeights, PoolVars, PromptPool,
};
use crate::tensor::{checksum_all, Graph, Tensor, Var};

/// How prompts reach the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptMode {
    /// Nearest pool element with straight-through gradients.
    Vq,
    /// The score-weighted mixture of pool elements.
    Soft,
    /// No prompts: only the classifier is trained.
    None,
}

impl PromptMode {
    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Vq => "vq",
            PromptMode::Soft => "soft",
            PromptMode::None => "none",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vq" => Ok(PromptMode::Vq),
            "soft" => Ok(PromptMode::Soft),
            "none" => Ok(PromptMode::None),
            other => Err(Error::contract(format!("unknown prompt mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Pseudo features drawn per class.
    pub per_class: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 64,
            per_class: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: PromptMode,
    /// Fine-tune the classifier on pseudo features after every task.
    pub calibrate: bool,
    pub learning_rate: f64,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub pool_size: usize,
    pub prompt_len: usize,
    pub temperature: f64,
    pub weights: LossWeights,
    pub variance_floor: f64,
    pub calibration: CalibrationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: PromptMode::Vq,
            calibrate: true,
            learning_rate: 0.0025,
            optimizer: AdamWConfig::default(),
            epochs: 20,
            batch_size: 16,
            pool_size: 10,
            prompt_len: 8,
            temperature: 1.0,
            weights: LossWeights::default(),
            variance_floor: 1e-6,
            calibration: CalibrationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::contract("at least one training epoch is required"));
        }
        if self.batch_size == 0 || self.calibration.batch_size == 0 {
            return Err(Error::contract("batch sizes must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::contract(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::contract("variance floor must be positive"));
        }
        if self.calibrate && self.calibration.per_class == 0 {
            return Err(Error::contract("calibration needs at least one pseudo feature per class"));
        }
        if self.mode != PromptMode::None && (self.pool_size == 0 || !self.prompt_len.is_multiple_of(2)) {
            return Err(Error::contract(format!(
                "prompt pool of {} elements with length {} (must be non-empty and even)",
                self.pool_size, self.prompt_len
            )));
        }
        LossWeights::new(self.weights.lambda_q, self.weights.lambda_c)?;
        Ok(())
    }
}

/// Linear classifier over the global label space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    /// `[C, D]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(classes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            weight: Tensor::uniform(vec![classes, dim], bound, rng).with_requires_grad(true),
            bias: Tensor::zeros(vec![classes]).with_requires_grad(true),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::dim(format!(
                "head weight {:?} and bias {:?} do not fit together",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight: weight.with_requires_grad(true),
            bias: bias.with_requires_grad(true),
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn checksum(&self) -> u64 {
        checksum_all([&self.weight, &self.bias])
    }

    pub fn bind(&self, graph: &mut Graph) -> (Var, Var) {
        (graph.param(&self.weight), graph.param(&self.bias))
    }

    /// `features [B, D]` to logits `[B, C]`.
    pub fn logits(graph: &mut Graph, vars: (Var, Var), features: Var) -> Result<Var> {
        let wt = graph.transpose(vars.0)?;
        let z = graph.matmul(features, wt)?;
        graph.add_bias(z, vars.1)
    }

    /// Logits of one feature vector, computed directly.
    pub fn logits_of(&self, feature: &[f64]) -> Vec<f64> {
        let d = self.dim();
        self.weight
            .data()
            .chunks_exact(d)
            .zip(self.bias.data())
            .map(|(w, b)| b + w.iter().zip(feature).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    /// Highest-scoring class among `candidates`; the lowest label wins ties.
    pub fn predict(&self, feature: &[f64], candidates: &[u32]) -> u32 {
        let logits = self.logits_of(feature);
        let mut best = (candidates[0], f64::NEG_INFINITY);
        for &c in candidates {
            if logits[c as usize] > best.1 {
                best = (c, logits[c as usize]);
            }
        }
        best.0
    }

    pub fn accumulate_grads(&mut self, graph: &Graph, vars: (Var, Var)) -> Result<()> {
        if let Some(g) = graph.grad(vars.0) {
            self.weight.accumulate_grad(g)?;
        }
        if let Some(g) = graph.grad(vars.1) {
            self.bias.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Diagonal Gaussian summary of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassStatistics {
    pub classes: BTreeMap<u32, ClassGaussian>,
}

impl ClassStatistics {
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }

    /// Adds per-class means and floored population variances of `features`
    /// (`[N, D]`). Classes already present are left as they are.
    pub fn extend_from_features(&mut self, features: &Tensor, labels: &[u32], floor: f64) -> Result<()> {
        let s = features.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!("{} labels for features {s:?}", labels.len())));
        }
        let d = s[1];
        let mut sums: BTreeMap<u32, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for (row, &label) in features.data().chunks_exact(d.max(1)).zip(labels) {
            let (sum, _, n) = sums.entry(label).or_insert_with(|| (vec![0.0; d], vec![0.0; d], 0));
            for (a, x) in sum.iter_mut().zip(row) {
                *a += x;
            }
            *n += 1;
        }
        for (sum, _, n) in sums.values_mut() {
            for a in sum.iter_mut() {
                *a /= *n as f64;
            }
        }
        for (row, label) in features.data().chunks_exact(d.max(1)).zip(labels) {
            let (mean, sq, _) = sums.get_mut(label).expect("entry created above");
            for ((q, x), m) in sq.iter_mut().zip(row).zip(mean.iter()) {
                *q += (x - m) * (x - m);
            }
        }
        for (label, (mean, sq, n)) in sums {
            if self.classes.contains_key(&label) {
                continue;
            }
            if n < 2 {
                warn!("class {label} has {n} sample(s); its variance is set to the floor");
            }
            let variance = sq.iter().map(|q| (q / n as f64).max(floor)).collect();
            self.classes.insert(label, ClassGaussian { mean, variance, count: n });
        }
        Ok(())
    }
}

/// Draws `per_class` vectors from every class Gaussian, class by class in
/// label order. Returns `[n, D]` features and their labels.
pub fn sample_pseudo_features(stats: &ClassStatistics, per_class: usize, seed: u64) -> Result<(Tensor, Vec<u32>)> {
    if per_class == 0 {
        return Err(Error::contract("per_class must be positive"));
    }
    let Some(first) = stats.classes.values().next() else {
        return Err(Error::contract("no class statistics to sample from"));
    };
    let d = first.mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(stats.classes.len() * per_class * d);
    let mut labels = Vec::with_capacity(stats.classes.len() * per_class);
    for (&label, g) in &stats.classes {
        let std: Vec<f64> = g.variance.iter().map(|v| v.sqrt()).collect();
        for _ in 0..per_class {
            for (m, s) in g.mean.iter().zip(&std) {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + s * z);
            }
            labels.push(label);
        }
    }
    Ok((Tensor::new(vec![labels.len(), d], data)?, labels))
}

/// Mask over the head rows with `true` for every listed class.
fn active_mask(classes: usize, labels: impl IntoIterator<Item = u32>) -> Vec<bool> {
    let mut mask = vec![false; classes];
    for c in labels {
        mask[c as usize] = true;
    }
    mask
}

/// Fine-tunes `head` on pseudo features of every class in `stats`, all of
/// them active, with balanced round-robin batches.
pub fn calibrate_classifier(
    head: &mut ClassifierHead,
    stats: &ClassStatistics,
    config: &CalibrationConfig,
    optimizer: AdamWConfig,
    seed: u64,
) -> Result<()> {
    if config.epochs == 0 || stats.is_empty() {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (features, labels) = sample_pseudo_features(stats, config.per_class, rng.random())?;
    if let Some(&c) = labels.iter().find(|&&c| c as usize >= head.classes()) {
        return Err(Error::contract(format!("class {c} outside a head of {} classes", head.classes())));
    }
    let active = active_mask(head.classes(), stats.labels());
    let classes = stats.classes.len();
    let per_class = config.per_class;
    let batch = config.batch_size.max(1);
    let steps_per_epoch = labels.len().div_ceil(batch);
    let schedule = CosineSchedule::new(config.learning_rate, steps_per_epoch * config.epochs);
    let mut opt = AdamW::new(optimizer);
    let mut step = 0;
    let mut within: Vec<Vec<usize>> = (0..classes).map(|c| (c * per_class..(c + 1) * per_class).collect()).collect();
    for _ in 0..config.epochs {
        for ids in within.iter_mut() {
            ids.shuffle(&mut rng);
        }
        let order: Vec<usize> = (0..per_class).flat_map(|k| within.iter().map(move |ids| ids[k])).collect();
        for chunk in order.chunks(batch) {
            let mut data = Vec::with_capacity(chunk.len() * head.dim());
            for &i in chunk {
                data.extend_from_slice(features.row(i));
            }
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i] as usize).collect();
            let mut graph = Graph::new();
            let vars = head.bind(&mut graph);
            let x = graph.constant(Tensor::new(vec![chunk.len(), head.dim()], data)?);
            let logits = ClassifierHead::logits(&mut graph, vars, x)?;
            let loss = graph.masked_cross_entropy(logits, &targets, &active)?;
            graph.backward(loss)?;
            head.accumulate_grads(&graph, vars)?;
            opt.step(&mut head.parameters_mut(), schedule.rate(step));
            step += 1;
        }
    }
    Ok(())
}

/// Mean losses of one epoch, weighted by batch size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub ce: f64,
    pub vq: f64,
    pub commit: f64,
    pub total: f64,
}

/// Everything that changes during a continual run.
#[derive(Clone, Debug)]
pub struct Learner {
    backbone: FrozenBackbone,
    pub pool: Option<PromptPool>,
    pub head: ClassifierHead,
    pub stats: ClassStatistics,
    pub config: TrainConfig,
    seen: Vec<u32>,
    rng: ChaCha8Rng,
}

struct Forward {
    features: Var,
    vq: Option<Var>,
    commit: Option<Var>,
}

impl Learner {
    pub fn new(backbone: FrozenBackbone, num_classes: usize, config: TrainConfig) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::contract("continual learning requires a frozen backbone"));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = backbone.config.d_model;
        let pool = match config.mode {
            PromptMode::None => None,
            _ => Some(PromptPool::init(config.pool_size, config.prompt_len, d, &mut rng)?),
        };
        let head = ClassifierHead::init(num_classes, d, &mut rng);
        Ok(Self {
            backbone,
            pool,
            head,
            stats: ClassStatistics::default(),
            config,
            seen: Vec::new(),
            rng,
        })
    }

    pub fn backbone(&self) -> &FrozenBackbone {
        &self.backbone
    }

    /// Classes of every task trained so far, ascending.
    pub fn seen_classes(&self) -> &[u32] {
        &self.seen
    }

    fn forward(&self, graph: &mut Graph, pool: Option<PoolVars>, queries: Tensor, tokens: Option<Tensor>) -> Result<Forward> {
        let q = graph.constant(queries);
        let (Some(pv), Some(tokens)) = (pool, tokens) else {
            return Ok(Forward {
                features: q,
                vq: None,
                commit: None,
            });
        };
        let alpha = similarity_scores(graph, pv.keys, q, self.config.temperature)?;
        let cont = aggregate_prompt(graph, pv.pool, alpha)?;
        let (prompt, vq, commit) = match self.config.mode {
            PromptMode::Vq => {
                let quant = quantize_prompt(graph, pv.pool, cont)?;
                let vq = vq_loss(graph, cont, quant.selected)?;
                let commit = commitment_loss(graph, cont, quant.selected)?;
                (quant.output, Some(vq), Some(commit))
            }
            _ => (cont, None, None),
        };
        let bvars = self.backbone.bind(graph);
        let tokens = graph.constant(tokens);
        let prompts = self.backbone.config.prompt_blocks.iter().map(|&b| (b, prompt)).collect();
        let features = self.backbone.encode_batch(graph, &bvars, tokens, &prompts)?;
        Ok(Forward { features, vq, commit })
    }

    fn gather(queries: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let d = queries.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(queries.row(i));
        }
        Tensor::new(vec![rows.len(), d], data)
    }

    /// Mode-consistent features of every sample, `[N, D]`.
    pub fn features(&self, dataset: &TaskDataset) -> Result<Tensor> {
        let queries = compute_queries(&self.backbone, dataset)?;
        if self.pool.is_none() {
            return Ok(queries);
        }
        let d = self.backbone.config.d_model;
        let mut out = Vec::with_capacity(dataset.len() * d);
        let indices: Vec<usize> = (0..dataset.len()).collect();
        for chunk in indices.chunks(64) {
            let mut graph = Graph::new();
            let pool = self.pool.as_ref().expect("checked above");
            let pv = PoolVars {
                pool: graph.constant(pool.pool.clone()),
                keys: graph.constant(pool.keys.clone()),
            };
            let f = self.forward(
                &mut graph,
                Some(pv),
                Self::gather(&queries, chunk)?,
                Some(dataset.batch_tokens(chunk)),
            )?;
            out.extend_from_slice(graph.data(f.features));
        }
        Tensor::new(vec![dataset.len(), d], out)
    }

    /// Top-1 predictions with every seen class as a candidate.
    pub fn predict(&self, dataset: &TaskDataset) -> Result<Vec<u32>> {
        if self.seen.is_empty() {
            return Err(Error::contract("no classes have been learned yet"));
        }
        let feats = self.features(dataset)?;
        Ok((0..dataset.len()).map(|i| self.head.predict(feats.row(i), &self.seen)).collect())
    }

    /// Trains prompts, keys and head on one task. Only the task's own
    /// classes take part in the cross-entropy.
    pub fn train_task(&mut self, dataset: &TaskDataset, classes: std::ops::Range<u32>) -> Result<Vec<EpochLoss>> {
        if let Some(s) = dataset.samples.iter().find(|s| !classes.contains(&s.label)) {
            return Err(Error::Data(format!(
                "sample {} has label {} outside the task classes {classes:?}",
                s.id, s.label
            )));
        }
        if classes.end as usize > self.head.classes() {
            return Err(Error::contract(format!(
                "task classes {classes:?} exceed a head of {} classes",
                self.head.classes()
            )));
        }
        if dataset.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        for c in classes.clone() {
            if let Err(at) = self.seen.binary_search(&c) {
                self.seen.insert(at, c);
            }
        }
        let active = active_mask(self.head.classes(), classes);
        let queries = compute_queries(&self.backbone, dataset)?;
        let cfg = self.config.clone();
        let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
        let schedule = CosineSchedule::new(cfg.learning_rate, steps_per_epoch * cfg.epochs);
        let mut opt = AdamW::new(cfg.optimizer);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut trace = Vec::with_capacity(cfg.epochs);
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut self.rng);
            let mut sums = [0.0; 4];
            for chunk in order.chunks(cfg.batch_size) {
                let mut graph = Graph::new();
                let pool_vars = self.pool.as_ref().map(|p| p.bind(&mut graph));
                let tokens = pool_vars.map(|_| dataset.batch_tokens(chunk));
                let fwd = self.forward(&mut graph, pool_vars, Self::gather(&queries, chunk)?, tokens)?;
                let head_vars = self.head.bind(&mut graph);
                let logits = ClassifierHead::logits(&mut graph, head_vars, fwd.features)?;
                let targets: Vec<usize> = chunk.iter().map(|&i| dataset.samples[i].label as usize).collect();
                let ce = graph.masked_cross_entropy(logits, &targets, &active)?;
                let (loss, vq, commit) = match (fwd.vq, fwd.commit) {
                    (Some(vq), Some(commit)) => {
                        let total = total_loss(&mut graph, ce, vq, commit, cfg.weights)?;
                        (total, graph.value(vq).item()?, graph.value(commit).item()?)
                    }
                    _ => (ce, 0.0, 0.0),
                };
                graph.backward(loss)?;
                let n = chunk.len() as f64;
                sums[0] += graph.value(ce).item()? * n;
                sums[1] += vq * n;
                sums[2] += commit * n;
                sums[3] += graph.value(loss).item()? * n;

                self.head.accumulate_grads(&graph, head_vars)?;
                let rate = schedule.rate(step);
                match (self.pool.as_mut(), pool_vars) {
                    (Some(pool), Some(pv)) => {
                        pool.accumulate_grads(&graph, &pv)?;
                        let [w, b] = self.head.parameters_mut();
                        let [p, k] = pool.parameters_mut();
                        opt.step(&mut [w, b, p, k], rate);
                    }
                    _ => opt.step(&mut self.head.parameters_mut(), rate),
                }
                step += 1;
            }
            let n = dataset.len() as f64;
            let entry = EpochLoss {
                epoch,
                ce: sums[0] / n,
                vq: sums[1] / n,
                commit: sums[2] / n,
                total: sums[3] / n,
            };
            debug!("task epoch {epoch}: {entry:?}");
            trace.push(entry);
        }
        Ok(trace)
    }

    /// Summarises the training features of newly learned classes.
    pub fn collect_class_statistics(&mut self, dataset: &TaskDataset) -> Result<()> {
        let feats = self.features(dataset)?;
        let labels: Vec<u32> = dataset.samples.iter().map(|s| s.label).collect();
        self.stats.extend_from_features(&feats, &labels, self.config.variance_floor)
    }

    /// Fine-tunes the head on pseudo features of every seen class.
    pub fn calibrate(&mut self) -> Result<()> {
        let seed = self.rng.random();
        calibrate_classifier(&mut self.head, &self.stats, &self.config.calibration, self.config.optimizer, seed)
    }
}

/// Pool and head after one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSnapshot {
    pub pool: Option<PromptPool>,
    pub head: ClassifierHead,
}

#[derive(Clone, Debug)]
pub struct ContinualRun {
    pub matrix: AccuracyMatrix,
    pub traces: Vec<Vec<EpochLoss>>,
    pub snapshots: Vec<TaskSnapshot>,
    pub backbone_checksum: u64,
}

/// Trains on every task in order, fills one accuracy column per task and
/// keeps a snapshot of the learned state after each.
pub fn run_continual(backbone: &FrozenBackbone, sequence: &TaskSequence, config: &TrainConfig) -> Result<ContinualRun> {
    sequence.validate()?;
    if sequence.is_empty() {
        return Err(Error::contract("task sequence is empty"));
    }
    let before = backbone.checksum();
    let mut learner = Learner::new(backbone.clone(), sequence.num_classes, config.clone())?;
    let mut matrix = AccuracyMatrix::new(sequence.len());
    let mut traces = Vec::with_capacity(sequence.len());
    let mut snapshots = Vec::with_capacity(sequence.len());
    for (t, task) in sequence.tasks.iter().enumerate() {
        traces.push(learner.train_task(&task.train, task.classes.clone())?);
        learner.collect_class_statistics(&task.train)?;
        if config.calibrate {
            learner.calibrate()?;
        }
        let tests: Vec<&TaskDataset> = sequence.tasks[..=t].iter().map(|task| &task.test).collect();
        let column = evaluate_split(|ds| learner.predict(ds), &tests)?;
        log::info!("{} after task {t}: {column:?}", config.mode);
        matrix.set_column(t, &column)?;
        snapshots.push(TaskSnapshot {
            pool: learner.pool.clone(),
            head: learner.head.clone(),
        });
    }
    let after = learner.backbone().checksum();
    if after != before {
        return Err(Error::contract("backbone parameters changed during the run"));
    }
    Ok(ContinualRun {
        matrix,
        traces,
        snapshots,
        backbone_checksum: after,
    })
}
