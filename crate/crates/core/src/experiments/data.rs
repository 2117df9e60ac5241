//! Synthetic classification tasks and batch samplers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BnError, Result};
use crate::net::{BatchSource, TrainBatch};
use crate::tensor::{concat_batch, Shape4, Tensor4};

/// Gaussian classes: `x = center[y] + noise * e`. With a positive
/// `cluster_scale`, grouped samples additionally share a latent offset
/// `z ~ N(0, cluster_scale^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: usize,
    pub dim: usize,
    /// Class centers are `separation * N(0, I)`.
    pub separation: f64,
    pub noise: f64,
    pub train: usize,
    pub val: usize,
    #[serde(default)]
    pub cluster_scale: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { classes: 16, dim: 32, separation: 1.0, noise: 1.0, train: 4096, val: 1024, cluster_scale: 0.0 }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 {
            return Err(BnError::InvalidParams("task needs at least 2 classes and 1 dimension".into()));
        }
        if self.noise < 0.0 || self.cluster_scale < 0.0 || !self.separation.is_finite() {
            return Err(BnError::InvalidParams("noise, cluster scale and separation must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Per-domain corruption `a * x + b + noise * e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub noise: f64,
}

impl Corruption {
    pub const NONE: Corruption = Corruption { a: 1.0, b: 0.0, noise: 0.0 };

    pub fn apply<R: Rng + ?Sized>(&self, x: &Tensor4, rng: &mut R) -> Tensor4 {
        let mut y = x.map(|v| self.a * v + self.b);
        if self.noise > 0.0 {
            for v in y.data_mut() {
                *v += self.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        y
    }
}

/// A domain of the shared-head study: `scale * x + mean` on every feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub mean: f64,
    pub scale: f64,
}

impl DomainShift {
    pub fn apply(&self, x: &Tensor4) -> Tensor4 {
        x.map(|v| self.scale * v + self.mean)
    }
}

/// Labelled samples, optionally tagged with a domain id each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor4,
    pub labels: Vec<usize>,
    pub domains: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.n()
    }

    pub fn is_empty(&self) -> bool {
        self.x.n() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            domains: self.domains.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect()),
        }
    }

    pub fn with_domain(mut self, d: usize) -> Dataset {
        self.domains = Some(vec![d; self.len()]);
        self
    }

    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let x = concat_batch(&parts.iter().map(|p| p.x.clone()).collect::<Vec<_>>())?;
        let labels = parts.iter().flat_map(|p| p.labels.clone()).collect();
        let domains = if parts.iter().all(|p| p.domains.is_some()) {
            Some(parts.iter().flat_map(|p| p.domains.clone().unwrap()).collect())
        } else {
            None
        };
        Ok(Dataset { x, labels, domains })
    }
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Centers = 0,
    Train = 1,
    Val = 2,
    Sgd = 3,
    Estimate = 4,
    Init = 5,
    Extra = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTask {
    pub cfg: TaskConfig,
    centers: Vec<Vec<f64>>,
}

impl GaussianTask {
    pub fn new(cfg: &TaskConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, Stream::Centers);
        let centers = (0..cfg.classes)
            .map(|_| (0..cfg.dim).map(|_| cfg.separation * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Ok(GaussianTask { cfg: cfg.clone(), centers })
    }

    fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, label: usize, offset: &[f64], out: &mut [f64]) {
        for ((o, c), z) in out.iter_mut().zip(&self.centers[label]).zip(offset) {
            *o = c + z + self.cfg.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }

    /// `n` independent samples with uniform labels (no shared latent).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Dataset {
        self.sample_classes(rng, n, &(0..self.cfg.classes).collect::<Vec<_>>())
    }

    /// Like [`GaussianTask::sample`] with labels uniform over `classes`.
    pub fn sample_classes<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, classes: &[usize]) -> Dataset {
        let zero = vec![0.0; self.cfg.dim];
        let mut x = Tensor4::zeros(Shape4::flat(n, self.cfg.dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = classes[rng.random_range(0..classes.len())];
            self.draw_into(rng, y, &zero, x.sample_mut(i));
            labels.push(y);
        }
        Dataset { x, labels, domains: None }
    }

    /// `groups` groups of `m` samples each, laid out group after group.
    pub fn sample_grouped<R: Rng + ?Sized>(&self, rng: &mut R, groups: usize, m: usize, key: GroupKey) -> Result<Dataset> {
        if m == 0 {
            return Err(BnError::InvalidParams("groups need at least one sample".into()));
        }
        let dim = self.cfg.dim;
        let mut x = Tensor4::zeros(Shape4::flat(groups * m, dim));
        let mut labels = Vec::with_capacity(groups * m);
        let mut classes: Vec<usize> = (0..self.cfg.classes).collect();
        for g in 0..groups {
            let ys: Vec<usize> = match key {
                GroupKey::Label => vec![rng.random_range(0..self.cfg.classes); m],
                GroupKey::Cluster => {
                    if m > self.cfg.classes {
                        return Err(BnError::InvalidParams("cluster members need distinct labels".into()));
                    }
                    classes.partial_shuffle(rng, m).0.to_vec()
                }
            };
            let z: Vec<f64> = (0..dim).map(|_| self.cfg.cluster_scale * rng.sample::<f64, _>(StandardNormal)).collect();
            for (k, &y) in ys.iter().enumerate() {
                self.draw_into(rng, y, &z, x.sample_mut(g * m + k));
                labels.push(y);
            }
        }
        Ok(Dataset { x, labels, domains: None })
    }

    /// Fixed train and validation sets from disjoint streams.
    pub fn splits(&self, seed: u64) -> (Dataset, Dataset) {
        let train = self.sample(&mut stream_rng(seed, Stream::Train), self.cfg.train);
        let val = self.sample(&mut stream_rng(seed, Stream::Val), self.cfg.val);
        (train, val)
    }
}

/// What the members of a group share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    /// The same class label.
    Label,
    /// A latent offset, with distinct labels.
    Cluster,
}

/// Batches of `groups` groups of `copies` correlated samples. Each worker
/// receives `workers`-th of the groups, so with one group per worker every
/// normalization cohort is exactly one group.
#[derive(Debug, Clone)]
pub struct GroupedBatchSampler {
    pub task: GaussianTask,
    pub groups: usize,
    pub copies: usize,
    pub key: GroupKey,
    pub workers: usize,
    rng: ChaCha8Rng,
}

impl GroupedBatchSampler {
    pub fn new(task: GaussianTask, groups: usize, copies: usize, key: GroupKey, workers: usize, rng: ChaCha8Rng) -> Result<Self> {
        if groups == 0 || copies == 0 || workers == 0 || !groups.is_multiple_of(workers) {
            return Err(BnError::InvalidParams(format!(
                "{groups} groups cannot be spread evenly over {workers} workers"
            )));
        }
        Ok(GroupedBatchSampler { task, groups, copies, key, workers, rng })
    }

    pub fn batch_size(&self) -> usize {
        self.groups * self.copies
    }
}

impl BatchSource for GroupedBatchSampler {
    fn next_batch(&mut self, _step: usize) -> Result<TrainBatch> {
        let d = self.task.sample_grouped(&mut self.rng, self.groups, self.copies, self.key)?;
        let per = self.batch_size() / self.workers;
        Ok(TrainBatch {
            x: d.x,
            labels: d.labels,
            worker_sizes: vec![per; self.workers],
            domains: None,
            reference: None,
        })
    }
}

/// Epoch-shuffled mini-batches from a fixed dataset, split evenly over workers.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    data: Dataset,
    batch: usize,
    workers: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    /// Reference pool handed to every batch, for virtual normalization.
    pub reference: Option<Tensor4>,
}

impl EpochSampler {
    pub fn new(data: Dataset, batch: usize, workers: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch == 0 || workers == 0 || !batch.is_multiple_of(workers) || batch > data.len() {
            return Err(BnError::InvalidParams(format!(
                "batch {batch} must be positive, divisible by {workers} workers and at most {} samples",
                data.len()
            )));
        }
        Ok(EpochSampler { order: Vec::new(), pos: 0, data, batch, workers, rng, reference: None })
    }
}

impl BatchSource for EpochSampler {
    fn next_batch(&mut self, _step: usize) -> Result<TrainBatch> {
        if self.pos + self.batch > self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        let d = self.data.select(idx);
        Ok(TrainBatch {
            x: d.x,
            labels: d.labels,
            worker_sizes: vec![self.batch / self.workers; self.workers],
            domains: d.domains,
            reference: self.reference.clone(),
        })
    }
}

/// Mini-batches with an equal share of each domain in every batch.
#[derive(Debug, Clone)]
pub struct DomainSampler {
    samplers: Vec<EpochSampler>,
}

impl DomainSampler {
    /// `per_domain` samples of each domain's dataset per batch.
    pub fn new(domains: Vec<Dataset>, per_domain: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let samplers = domains
            .into_iter()
            .map(|d| EpochSampler::new(d, per_domain, 1, ChaCha8Rng::seed_from_u64(rng.random())))
            .collect::<Result<_>>()?;
        Ok(DomainSampler { samplers })
    }
}

impl BatchSource for DomainSampler {
    fn next_batch(&mut self, step: usize) -> Result<TrainBatch> {
        let parts: Vec<TrainBatch> = self.samplers.iter_mut().map(|s| s.next_batch(step)).collect::<Result<_>>()?;
        let data = Dataset::concat(
            &parts
                .into_iter()
                .map(|b| Dataset { x: b.x, labels: b.labels, domains: b.domains })
                .collect::<Vec<_>>(),
        )?;
        let n = data.len();
        Ok(TrainBatch { x: data.x, labels: data.labels, worker_sizes: vec![n], domains: data.domains, reference: None })
    }
}
