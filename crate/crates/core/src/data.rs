//! Deterministic synthetic class-incremental benchmarks and their on-disk
//! format.
//!
//! Every class is an anchor token sequence drawn uniform(-1, 1) per
//! coordinate; samples are the anchor plus isotropic Gaussian noise. The
//! pretraining classes and the continual classes never share a label.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DATASET_MAGIC: &[u8; 8] = b"VQPDSET\0";
const DATASET_VERSION: u32 = 1;

/// Task id carried by the pretraining datasets.
pub const PRETRAIN_TASK_ID: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: u32,
    /// `seq_len * token_dim` values, token-major.
    pub tokens: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: u32,
    pub split: Split,
    pub seq_len: usize,
    pub token_dim: usize,
    pub samples: Vec<Sample>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Smallest range covering every label, or an empty range.
    pub fn label_range(&self) -> Range<u32> {
        let labels = self.labels();
        match (labels.first(), labels.last()) {
            (Some(&lo), Some(&hi)) => lo..hi + 1,
            _ => 0..0,
        }
    }

    /// Stacks the selected samples into a `[batch, seq_len, token_dim]` tensor.
    pub fn batch_tokens(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.seq_len * self.token_dim);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].tokens);
        }
        Tensor::new(vec![indices.len(), self.seq_len, self.token_dim], data)
            .expect("samples hold seq_len * token_dim values")
    }
}

/// One step of the continual sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Range<u32>,
    pub train: TaskDataset,
    pub test: TaskDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    /// Size of the global label space `|Y_1 ∪ … ∪ Y_T|`.
    pub num_classes: usize,
    pub seed: u64,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Checks that task label sets are pairwise disjoint and that each
    /// task's samples stay inside its declared class range.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for c in task.classes.clone() {
                if !seen.insert(c) {
                    return Err(Error::Protocol(format!(
                        "class {c} of task {t} already belongs to an earlier task"
                    )));
                }
                if c as usize >= self.num_classes {
                    return Err(Error::Protocol(format!(
                        "class {c} of task {t} exceeds the label space of {}",
                        self.num_classes
                    )));
                }
            }
            for ds in [&task.train, &task.test] {
                if let Some(s) = ds.samples.iter().find(|s| !task.classes.contains(&s.label)) {
                    return Err(Error::Data(format!(
                        "sample {} of task {t} has label {} outside {:?}",
                        s.id, s.label, task.classes
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkParams {
    pub seed: u64,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub noise_scale: f64,
    pub pretrain_classes: usize,
    pub pretrain_samples_per_class: usize,
    pub seq_len: usize,
    pub token_dim: usize,
    pub train_fraction: f64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: 5,
            classes_per_task: 2,
            samples_per_class: 100,
            noise_scale: 0.5,
            pretrain_classes: 10,
            pretrain_samples_per_class: 200,
            seq_len: 16,
            token_dim: 32,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub pretrain_train: TaskDataset,
    pub pretrain_test: TaskDataset,
    pub sequence: TaskSequence,
}

struct ClassSampler<'a> {
    rng: &'a mut ChaCha8Rng,
    next_id: u64,
    params: &'a BenchmarkParams,
}

impl ClassSampler<'_> {
    fn class(&mut self, label: u32, count: usize, train: &mut Vec<Sample>, test: &mut Vec<Sample>) -> Result<()> {
        let width = self.params.seq_len * self.params.token_dim;
        let anchor: Vec<f64> = (0..width).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        let noise = Normal::new(0.0, self.params.noise_scale)
            .map_err(|e| Error::contract(format!("noise scale: {e}")))?;
        let n_train = ((count as f64) * self.params.train_fraction).round() as usize;
        for i in 0..count {
            let tokens = anchor.iter().map(|a| a + noise.sample(self.rng)).collect();
            let sample = Sample {
                id: self.next_id,
                label,
                tokens,
            };
            self.next_id += 1;
            if i < n_train {
                train.push(sample);
            } else {
                test.push(sample);
            }
        }
        Ok(())
    }
}

/// Generates the pretraining split and the continual task sequence.
///
/// Continual classes take global labels `0..tasks * classes_per_task`;
/// pretraining classes follow them. The result is a pure function of
/// `params`.
pub fn generate_benchmark(params: &BenchmarkParams) -> Result<Benchmark> {
    if params.tasks == 0 {
        return Err(Error::contract("at least one task is required"));
    }
    if params.classes_per_task < 2 {
        return Err(Error::contract("each task needs at least two classes"));
    }
    if params.samples_per_class < 2 || params.seq_len == 0 || params.token_dim == 0 {
        return Err(Error::contract("empty classes or token sequences"));
    }
    if !(params.noise_scale >= 0.0) || !(0.0..=1.0).contains(&params.train_fraction) {
        return Err(Error::contract("noise scale must be >= 0 and train fraction in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut sampler = ClassSampler {
        rng: &mut rng,
        next_id: 0,
        params,
    };
    let empty = |task_id, split| TaskDataset {
        task_id,
        split,
        seq_len: params.seq_len,
        token_dim: params.token_dim,
        samples: Vec::new(),
    };

    let mut tasks = Vec::with_capacity(params.tasks);
    for t in 0..params.tasks {
        let lo = (t * params.classes_per_task) as u32;
        let classes = lo..lo + params.classes_per_task as u32;
        let mut train = empty(t as u32, Split::Train);
        let mut test = empty(t as u32, Split::Test);
        for c in classes.clone() {
            sampler.class(c, params.samples_per_class, &mut train.samples, &mut test.samples)?;
        }
        tasks.push(Task { classes, train, test });
    }

    let num_classes = params.tasks * params.classes_per_task;
    let mut pretrain_train = empty(PRETRAIN_TASK_ID, Split::Train);
    let mut pretrain_test = empty(PRETRAIN_TASK_ID, Split::Test);
    for c in 0..params.pretrain_classes {
        sampler.class(
            (num_classes + c) as u32,
            params.pretrain_samples_per_class,
            &mut pretrain_train.samples,
            &mut pretrain_test.samples,
        )?;
    }

    Ok(Benchmark {
        pretrain_train,
        pretrain_test,
        sequence: TaskSequence {
            tasks,
            num_classes,
            seed: params.seed,
        },
    })
}

pub fn encode_dataset(dataset: &TaskDataset) -> Vec<u8> {
    let width = dataset.seq_len * dataset.token_dim;
    let mut out = Vec::with_capacity(33 + dataset.len() * (12 + 8 * width));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&dataset.task_id.to_le_bytes());
    out.push(dataset.split.code());
    out.extend_from_slice(&(dataset.seq_len as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.token_dim as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for s in &dataset.samples {
        out.extend_from_slice(&s.id.to_le_bytes());
        out.extend_from_slice(&s.label.to_le_bytes());
        for v in &s.tokens {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Little-endian cursor that reports the byte offset of any failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.offset(),
                format!("truncated while reading {what}"),
            )),
        }
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.saturating_mul(8), what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TaskDataset> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, not a dataset file"));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(8, format!("unsupported dataset version {version}")));
    }
    let task_id = r.u32("task id")?;
    let at = r.offset();
    let split = Split::from_code(r.u8("split")?)
        .ok_or_else(|| Error::format(at, "unknown split code"))?;
    let seq_len = r.u32("sequence length")? as usize;
    let token_dim = r.u32("token dimension")? as usize;
    let count = r.u64("sample count")?;
    let width = seq_len * token_dim;
    let record = 12 + 8 * width as u64;
    let remaining = (bytes.len() as u64).saturating_sub(r.offset());
    if count.saturating_mul(record) > remaining {
        return Err(Error::format(
            r.offset(),
            format!("truncated: {count} samples need {} bytes, {remaining} present", count.saturating_mul(record)),
        ));
    }
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = r.u64("sample id")?;
        let label = r.u32("label")?;
        let tokens = r.f64s(width, "token values")?;
        samples.push(Sample { id, label, tokens });
    }
    r.finish()?;
    Ok(TaskDataset {
        task_id,
        split,
        seq_len,
        token_dim,
        samples,
    })
}

pub fn write_dataset(path: &Path, dataset: &TaskDataset) -> Result<()> {
    fs::write(path, encode_dataset(dataset))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<TaskDataset> {
    decode_dataset(&fs::read(path)?)
}

pub const MANIFEST_FILE: &str = "manifest.txt";

fn dataset_file(task: &str, split: Split) -> String {
    format!("{task}_{}.bin", split.name())
}

/// Plain-text listing: one line per task with its id, classes and counts.
pub fn manifest(benchmark: &Benchmark) -> String {
    let mut out = String::new();
    let range = benchmark.pretrain_train.label_range();
    let _ = writeln!(
        out,
        "pretrain classes={}-{} train={} test={}",
        range.start,
        range.end.saturating_sub(1),
        benchmark.pretrain_train.len(),
        benchmark.pretrain_test.len()
    );
    for (t, task) in benchmark.sequence.tasks.iter().enumerate() {
        let _ = writeln!(
            out,
            "task={t} classes={}-{} train={} test={}",
            task.classes.start,
            task.classes.end - 1,
            task.train.len(),
            task.test.len()
        );
    }
    let _ = writeln!(
        out,
        "seed={} num_classes={}",
        benchmark.sequence.seed, benchmark.sequence.num_classes
    );
    out
}

/// Writes the manifest and one binary file per dataset into `dir`.
pub fn write_benchmark_dir(dir: &Path, benchmark: &Benchmark) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_dataset(&dir.join(dataset_file("pretrain", Split::Train)), &benchmark.pretrain_train)?;
    write_dataset(&dir.join(dataset_file("pretrain", Split::Test)), &benchmark.pretrain_test)?;
    for (t, task) in benchmark.sequence.tasks.iter().enumerate() {
        let name = format!("task{t}");
        write_dataset(&dir.join(dataset_file(&name, Split::Train)), &task.train)?;
        write_dataset(&dir.join(dataset_file(&name, Split::Test)), &task.test)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest(benchmark))?;
    Ok(())
}

fn parse_classes(field: &str) -> Option<Range<u32>> {
    let (lo, hi) = field.strip_prefix("classes=")?.split_once('-')?;
    Some(lo.parse().ok()?..hi.parse::<u32>().ok()? + 1)
}

/// Reads a directory written by [`write_benchmark_dir`].
pub fn read_benchmark_dir(dir: &Path) -> Result<Benchmark> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let bad = |line: &str| Error::Data(format!("malformed manifest line: {line:?}"));
    let mut tasks = Vec::new();
    let mut seed = None;
    let mut num_classes = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first() {
            Some(f) if f.starts_with("task=") => {
                let classes = fields.get(1).and_then(|f| parse_classes(f)).ok_or_else(|| bad(line))?;
                let name = format!("task{}", tasks.len());
                let train = read_dataset(&dir.join(dataset_file(&name, Split::Train)))?;
                let test = read_dataset(&dir.join(dataset_file(&name, Split::Test)))?;
                tasks.push(Task { classes, train, test });
            }
            Some(f) if f.starts_with("seed=") => {
                seed = f[5..].parse().ok();
                num_classes = fields
                    .get(1)
                    .and_then(|f| f.strip_prefix("num_classes="))
                    .and_then(|v| v.parse().ok());
            }
            Some(&"pretrain") => {}
            _ => return Err(bad(line)),
        }
    }
    let sequence = TaskSequence {
        tasks,
        num_classes: num_classes.ok_or_else(|| bad("missing num_classes"))?,
        seed: seed.ok_or_else(|| bad("missing seed"))?,
    };
    Ok(Benchmark {
        pretrain_train: read_dataset(&dir.join(dataset_file("pretrain", Split::Train)))?,
        pretrain_test: read_dataset(&dir.join(dataset_file("pretrain", Split::Test)))?,
        sequence,
    })
}
