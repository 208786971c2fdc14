//! Optimizers, the Siamese and matching training loops, one-shot and
//! silhouette evaluation, and run-record export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, sample_episode_with, sample_pairs_with, Dataset, PairBatch};
use crate::error::{Error, Result};
use crate::layer::{Activation, KafConfig};
use crate::losses::{batch_contrastive_loss, DEFAULT_MARGIN};
use crate::metrics::{silhouette_score, EmbeddingSet};
use crate::models::{
    att_spec, matching_forward, matching_nll, matching_spec, mnist_spec, Embedder, Model, ModelKind, Network,
    NetworkSpec,
};
use crate::tensor::Tensor;

/// Caps the evaluation thread pool when set.
pub const THREADS_ENV: &str = "KAF_ONESHOT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Which data a run used; echoed into the run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    pub subset: Option<usize>,
}

impl Default for DatasetRef {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; `None` means `max(1, N / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub margin: f64,
    pub seed: u64,
    pub activation: Activation,
    pub dataset: DatasetRef,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub kaf: KafConfig,
    pub n_way: usize,
    pub k_shot: usize,
    /// Query images per training episode.
    pub queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            epochs: 10,
            batch_size: 32,
            steps_per_epoch: None,
            margin: DEFAULT_MARGIN,
            seed: 0,
            activation: Activation::Relu,
            dataset: DatasetRef::default(),
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            kaf: KafConfig::default(),
            n_way: 5,
            k_shot: 1,
            queries: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("margin", self.margin)?;
        positive("eps", self.eps)?;
        if let Some(c) = self.clip_norm {
            positive("clip_norm", c)?;
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("queries", self.queries),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Parameter("steps_per_epoch must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        self.kaf.dictionary()?;
        Ok(())
    }

    pub fn steps_for(&self, dataset_len: usize) -> usize {
        self.steps_per_epoch.unwrap_or((dataset_len / self.batch_size).max(1))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `param` in place; `t` counts from 1.
pub fn adam_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) -> Result<()> {
    if t == 0 {
        return Err(Error::Parameter("Adam step index starts at 1".into()));
    }
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::Dimension(format!(
            "Adam buffers disagree: param {}, grad {}, m {}, v {}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at element {i}")));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        param[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Updates every parameter of a network from its accumulated gradients.
pub trait Optimizer {
    fn step(&mut self, network: &mut Network) -> Result<()>;
}

fn layer_label(network: &Network, index: usize) -> String {
    format!("layer {index} ({})", network.layers()[index].spec().name())
}

fn check_grads(network: &Network) -> Result<()> {
    for (i, layer) in network.layers().iter().enumerate() {
        if let Some(j) = layer.grads().iter().position(|g| !g.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {} parameter {j}",
                layer_label(network, i)
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    moments: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, network: &mut Network) -> Result<()> {
        check_grads(network)?;
        if self.moments.is_empty() {
            self.moments = network
                .layers()
                .iter()
                .map(|l| l.grads().iter().map(|g| (vec![0.0; g.len()], vec![0.0; g.len()])).collect())
                .collect();
        }
        self.t += 1;
        for (i, layer) in network.layers_mut().iter_mut().enumerate() {
            for ((param, grad), (m, v)) in layer.param_grad_pairs().zip(self.moments[i].iter_mut()) {
                adam_step(param.data_mut(), grad.data(), m, v, self.t, &self.cfg)
                    .map_err(|e| Error::Numeric(format!("layer {i}: {e}")))?;
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, network: &mut Network) -> Result<()> {
        check_grads(network)?;
        for layer in network.layers_mut() {
            for (param, grad) in layer.param_grad_pairs() {
                param.add_scaled(grad, -self.lr)?;
            }
        }
        Ok(())
    }
}

pub fn make_optimizer(cfg: &TrainConfig) -> Box<dyn Optimizer> {
    match cfg.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        })),
        OptimizerKind::Sgd => Box::new(Sgd { lr: cfg.lr }),
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(network: &mut Network, max_norm: f64) -> f64 {
    let norm = network
        .layers()
        .iter()
        .flat_map(|l| l.grads().iter())
        .map(Tensor::sum_squares)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for layer in network.layers_mut() {
            for g in layer.grads_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    norm
}

/// Loss history and final metrics of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub model: ModelKind,
    pub seed: u64,
    pub steps: usize,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Wall-clock seconds per epoch; kept out of `metrics.json`.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
    pub metrics: BTreeMap<String, f64>,
}

/// The `metrics.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub config: TrainConfig,
    pub model: ModelKind,
    pub seed: u64,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn metrics_doc(&self) -> MetricsDoc {
        MetricsDoc {
            config: self.config.clone(),
            model: self.model,
            seed: self.seed,
            steps: self.steps,
            epoch_losses: self.epoch_losses.clone(),
            metrics: self.metrics.clone(),
        }
    }

    pub fn write_loss_curve<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,mean_loss,seconds")?;
        for (i, loss) in self.epoch_losses.iter().enumerate() {
            let secs = self.epoch_seconds.get(i).copied().unwrap_or(0.0);
            writeln!(out, "{},{loss},{secs}", i + 1)?;
        }
        Ok(())
    }

    /// Writes `loss_curve.csv` and `metrics.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let mut csv = BufWriter::new(File::create(dir.join("loss_curve.csv"))?);
        self.write_loss_curve(&mut csv)?;
        csv.flush()?;
        let mut json = BufWriter::new(File::create(dir.join("metrics.json"))?);
        serde_json::to_writer_pretty(&mut json, &self.metrics_doc())?;
        json.write_all(b"\n")?;
        json.flush()?;
        Ok(())
    }
}

fn diverged(step: usize, err: Error) -> Error {
    match err {
        Error::Numeric(message) => Error::Divergence { step, message },
        other => other,
    }
}

/// Siamese backbone matched to the image extent: 28×28 gets the two-conv
/// digit network, 100×100 the three-conv face network.
pub fn siamese_spec_for(image_shape: &[usize], activation: Activation, kaf: KafConfig) -> Result<NetworkSpec> {
    match image_shape {
        [1, 28, 28] => Ok(mnist_spec(activation, kaf)),
        [1, 100, 100] => Ok(att_spec(activation, kaf)),
        other => Err(Error::Parameter(format!(
            "no Siamese backbone for images of shape {other:?} (supported: [1, 28, 28], [1, 100, 100])"
        ))),
    }
}

/// Forward, loss, backward, clip, and update on one pair batch. Returns the
/// batch loss.
pub fn siamese_step(
    model: &mut Model,
    optimizer: &mut dyn Optimizer,
    batch: &PairBatch,
    margin: f64,
    clip_norm: Option<f64>,
) -> Result<f64> {
    model.network.zero_grad();
    let (e1, e2) = model.siamese_forward(&batch.x1, &batch.x2)?;
    let (loss, g1, g2) = batch_contrastive_loss(&e1, &e2, &batch.y, margin)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    model.siamese_backward(&g1, &g2)?;
    if let Some(c) = clip_norm {
        clip_grad_norm(&mut model.network, c);
    }
    optimizer.step(&mut model.network)?;
    model.network.clear_cache();
    model.steps += 1;
    Ok(loss)
}

/// Trains an existing Siamese model on pairs drawn from `ds`.
pub fn train_siamese_model(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let mut optimizer = make_optimizer(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a17_0000_0000_0001);
    let steps = cfg.steps_for(ds.len());
    let mut record = empty_record(cfg, ModelKind::Siamese);
    for _ in 0..cfg.epochs {
        let start = Instant::now();
        let mut sum = 0.0;
        for _ in 0..steps {
            let step = model.steps;
            let batch = sample_pairs_with(ds, cfg.batch_size, &mut rng)?;
            let loss = siamese_step(model, optimizer.as_mut(), &batch, cfg.margin, cfg.clip_norm)
                .map_err(|e| diverged(step, e))?;
            record.step_losses.push(loss);
            sum += loss;
        }
        record.epoch_losses.push(sum / steps as f64);
        record.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    record.steps = model.steps;
    Ok(record)
}

/// Builds the backbone for `ds` and trains it with the contrastive loss.
pub fn train_siamese(ds: &Dataset, cfg: &TrainConfig) -> Result<(Model, RunRecord)> {
    cfg.validate()?;
    let spec = siamese_spec_for(ds.image_shape(), cfg.activation, cfg.kaf.clone())?;
    let mut model = Model::new(ModelKind::Siamese, spec, cfg.seed)?;
    let record = train_siamese_model(&mut model, ds, cfg)?;
    Ok((model, record))
}

fn empty_record(cfg: &TrainConfig, kind: ModelKind) -> RunRecord {
    RunRecord {
        config: cfg.clone(),
        model: kind,
        seed: cfg.seed,
        steps: 0,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        step_losses: Vec::new(),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        metrics: BTreeMap::new(),
    }
}

/// One episode of matching-network training: support and query go through
/// the network in a single batch; the loss is the mean query NLL.
pub fn matching_step(
    model: &mut Model,
    optimizer: &mut dyn Optimizer,
    episode: &crate::data::Episode,
    clip_norm: Option<f64>,
) -> Result<f64> {
    model.network.zero_grad();
    let s = episode.support_labels.len();
    let q = episode.query_labels.len();
    let all = Tensor::concat(&[&episode.support, &episode.query])?;
    let emb = model.network.forward(&all)?;
    let (support, queries) = emb.split_at(s);
    let e = support.shape()[1];
    let mut grad = Tensor::zeros(emb.shape());
    let inv = 1.0 / q as f64;
    let mut total = 0.0;
    for j in 0..q {
        let out = matching_nll(&support, &episode.support_labels, queries.item(j), episode.query_labels[j])?;
        total += out.loss;
        let g = grad.data_mut();
        for (dst, src) in g[..s * e].iter_mut().zip(out.grad_support.data()) {
            *dst += src * inv;
        }
        for (dst, src) in g[(s + j) * e..(s + j + 1) * e].iter_mut().zip(&out.grad_query) {
            *dst += src * inv;
        }
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    model.network.backward(&grad)?;
    if let Some(c) = clip_norm {
        clip_grad_norm(&mut model.network, c);
    }
    optimizer.step(&mut model.network)?;
    model.network.clear_cache();
    model.steps += 1;
    Ok(loss)
}

/// Trains an existing matching model on `n_way`-way `k_shot`-shot episodes.
pub fn train_matching_model(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    n_way: usize,
    k_shot: usize,
) -> Result<RunRecord> {
    let cfg = TrainConfig {
        n_way,
        k_shot,
        ..cfg.clone()
    };
    cfg.validate()?;
    // Fail fast: an impossible episode is reported before any step runs.
    sample_episode(ds, n_way, k_shot, cfg.queries, cfg.seed)?;
    let mut optimizer = make_optimizer(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3a7c_0000_0000_0002);
    let steps = cfg.steps_for(ds.len());
    let mut record = empty_record(&cfg, ModelKind::Matching);
    for _ in 0..cfg.epochs {
        let start = Instant::now();
        let mut sum = 0.0;
        for _ in 0..steps {
            let step = model.steps;
            let episode = sample_episode_with(ds, n_way, k_shot, cfg.queries, &mut rng)?;
            let loss = matching_step(model, optimizer.as_mut(), &episode, cfg.clip_norm).map_err(|e| diverged(step, e))?;
            record.step_losses.push(loss);
            sum += loss;
        }
        record.epoch_losses.push(sum / steps as f64);
        record.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    record.steps = model.steps;
    Ok(record)
}

pub fn train_matching(ds: &Dataset, cfg: &TrainConfig, n_way: usize, k_shot: usize) -> Result<(Model, RunRecord)> {
    cfg.validate()?;
    let mut model = Model::new(ModelKind::Matching, matching_spec(cfg.activation, cfg.kaf.clone()), cfg.seed)?;
    let record = train_matching_model(&mut model, ds, cfg, n_way, k_shot)?;
    Ok((model, record))
}

/// Evaluation thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn eval_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Parameter(format!("{THREADS_ENV} must be a positive integer, got '{s}'"))),
        },
    }
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    // SplitMix64 finalizer keeps neighbouring trials decorrelated.
    let mut z = seed ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean argmax accuracy of the matching head over `trials` fresh
/// `n_way`-way `k_shot`-shot episodes with one query each. Trials run in
/// parallel; the result does not depend on scheduling.
pub fn eval_nway<M: Embedder + Sync + ?Sized>(
    model: &M,
    ds: &Dataset,
    n_way: usize,
    k_shot: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Parameter("trials must be positive".into()));
    }
    let run = || -> Result<usize> {
        (0..trials)
            .into_par_iter()
            .map(|t| -> Result<usize> {
                let ep = sample_episode(ds, n_way, k_shot, 1, trial_seed(seed, t))?;
                let all = Tensor::concat(&[&ep.support, &ep.query])?;
                let emb = model.embed_batch(&all)?;
                let (support, query) = emb.split_at(ep.support_labels.len());
                let dist = matching_forward(&support, &ep.support_labels, query.item(0))?;
                Ok(usize::from(dist.argmax() == ep.query_labels[0]))
            })
            .try_reduce(|| 0, |a, b| Ok(a + b))
    };
    let correct = match eval_threads()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(correct as f64 / trials as f64)
}

/// [`eval_nway`] with one support image per class.
pub fn eval_oneshot<M: Embedder + Sync + ?Sized>(model: &M, ds: &Dataset, n_way: usize, trials: usize, seed: u64) -> Result<f64> {
    eval_nway(model, ds, n_way, 1, trials, seed)
}

/// Embeds every image of `ds` in chunks, returning `[N, E]`.
pub fn embed_dataset<M: Embedder + ?Sized>(model: &M, ds: &Dataset) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let mut parts = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        parts.push(model.embed_batch(&ds.images.select(chunk))?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat(&refs)
}

/// Silhouette score of the embeddings of `ds`, clustered by class label.
pub fn eval_silhouette<M: Embedder + ?Sized>(model: &M, ds: &Dataset) -> Result<f64> {
    model.ensure_ready()?;
    let points = embed_dataset(model, ds)?;
    silhouette_score(&EmbeddingSet::new(points, ds.labels.clone())?)
}
