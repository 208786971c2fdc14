//! Network construction, the weight-shared Siamese twin, the matching head,
//! and checkpoint files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{Activation, KafConfig, LayerParams, LayerSpec, LayerState};
use crate::tensor::Tensor;

/// Declarative architecture: input extents, ordered layers, activation choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-example input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub activation: Activation,
    pub embedding_dim: usize,
    pub kaf: KafConfig,
}

impl NetworkSpec {
    /// Per-example shape after every layer; fails if any pair of consecutive
    /// layers does not compose or the final extent is not `[embedding_dim]`.
    pub fn trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer
                .output_shape(&cur)
                .map_err(|e| Error::Dimension(format!("layer {i}: {e}")))?;
            shapes.push(cur.clone());
        }
        if cur != [self.embedding_dim] {
            return Err(Error::Dimension(format!(
                "network ends in {cur:?}, expected [{}]",
                self.embedding_dim
            )));
        }
        Ok(shapes)
    }

    /// Flattened extent entering the first linear layer.
    pub fn flatten_extent(&self) -> Result<usize> {
        let shapes = self.trace()?;
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Flatten))
            .map(|i| shapes[i][0])
            .ok_or_else(|| Error::Parameter("network has no flatten layer".into()))
    }
}

/// Appends an activation over `channels` inputs and returns the resulting channel count.
fn push_activation(layers: &mut Vec<LayerSpec>, act: Activation, channels: usize) -> usize {
    layers.push(LayerSpec::activation(act, channels));
    act.output_channels(channels)
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride: 1,
    }
}

const POOL: LayerSpec = LayerSpec::MaxPool2d { window: 2 };

/// MNIST backbone: `28×28` → conv(1→20, k5) → pool → conv(20→50, k5) → pool
/// → linear(800→500) → activation → linear(→2).
pub fn mnist_spec(activation: Activation, kaf: KafConfig) -> NetworkSpec {
    let mut layers = vec![conv(1, 20, 5), POOL, conv(20, 50, 5), POOL, LayerSpec::Flatten];
    layers.push(LayerSpec::Linear {
        inputs: 50 * 4 * 4,
        outputs: 500,
    });
    let width = push_activation(&mut layers, activation, 500);
    layers.push(LayerSpec::Linear {
        inputs: width,
        outputs: 2,
    });
    NetworkSpec {
        input_shape: vec![1, 28, 28],
        layers,
        activation,
        embedding_dim: 2,
        kaf,
    }
}

/// AT&T faces backbone: `100×100` → three conv(k5)+activation+pool stages
/// (1→4, 4→8, 8→8) → linear(→500)+act → linear(→250)+act → linear(→5).
///
/// A 2-D KAF halves the channel count it acts on, so the layer after it
/// takes half the listed width.
pub fn att_spec(activation: Activation, kaf: KafConfig) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut channels = 1;
    let mut side = 100;
    for out in [4, 8, 8] {
        layers.push(conv(channels, out, 5));
        channels = push_activation(&mut layers, activation, out);
        layers.push(POOL);
        side = (side - 4) / 2;
    }
    layers.push(LayerSpec::Flatten);
    let mut width = channels * side * side;
    for out in [500, 250] {
        layers.push(LayerSpec::Linear { inputs: width, outputs: out });
        width = push_activation(&mut layers, activation, out);
    }
    layers.push(LayerSpec::Linear { inputs: width, outputs: 5 });
    NetworkSpec {
        input_shape: vec![1, 100, 100],
        layers,
        activation,
        embedding_dim: 5,
        kaf,
    }
}

/// Matching-network embedder: `28×28` → two conv(k5)+activation+pool stages
/// (1→32, 32→64) → linear(→256)+act → linear(→128)+act → linear(→64).
pub fn matching_spec(activation: Activation, kaf: KafConfig) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut channels = 1;
    for out in [32, 64] {
        layers.push(conv(channels, out, 5));
        channels = push_activation(&mut layers, activation, out);
        layers.push(POOL);
    }
    layers.push(LayerSpec::Flatten);
    let mut width = channels * 4 * 4;
    for out in [256, 128] {
        layers.push(LayerSpec::Linear { inputs: width, outputs: out });
        width = push_activation(&mut layers, activation, out);
    }
    layers.push(LayerSpec::Linear { inputs: width, outputs: 64 });
    NetworkSpec {
        input_shape: vec![1, 28, 28],
        layers,
        activation,
        embedding_dim: 64,
        kaf,
    }
}

/// Anything that maps images to embeddings.
pub trait Embedder {
    /// Embeddings `[N, E]` for images `[N, C, H, W]`.
    fn embed_batch(&self, images: &Tensor) -> Result<Tensor>;

    /// Embedding `[E]` of a single image given as `[C, H, W]` or `[1, C, H, W]`.
    fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let batched = if image.rank() == 3 {
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            image.clone().reshape(&shape)?
        } else {
            image.clone()
        };
        if batched.dim(0)? != 1 {
            return Err(Error::Dimension(format!("expected a single image, got {:?}", image.shape())));
        }
        let e = self.embed_batch(&batched)?;
        let len = e.len();
        e.reshape(&[len])
    }

    /// Errors if the embedder is not in a usable state.
    fn ensure_ready(&self) -> Result<()> {
        Ok(())
    }
}

/// A feed-forward stack of layers built from a [`NetworkSpec`].
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerState>,
}

impl Network {
    /// Deterministically initialized network.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.trace()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| LayerState::init(l.clone(), &spec.kaf, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { spec, layers })
    }

    /// Network with explicit per-layer parameters.
    pub fn from_params(spec: NetworkSpec, params: Vec<LayerParams>) -> Result<Self> {
        spec.trace()?;
        if params.len() != spec.layers.len() {
            return Err(Error::Dimension(format!(
                "{} parameter groups for {} layers",
                params.len(),
                spec.layers.len()
            )));
        }
        let layers = spec
            .layers
            .iter()
            .zip(params)
            .map(|(l, p)| LayerState::with_params(l.clone(), p))
            .collect::<Result<_>>()?;
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerState] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerState::param_count).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Dimension(format!(
                "network expects [N, {:?}], got {:?}",
                self.spec.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass that fills every layer's cache.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur)?;
        }
        Ok(cur)
    }

    /// Cache-free forward pass.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur)?;
        }
        Ok(cur)
    }

    /// Backpropagates `upstream` (gradient of the loss with respect to the
    /// last forward output), accumulating parameter gradients.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let mut cur = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(LayerState::zero_grad);
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(LayerState::clear_cache);
    }

    /// Snapshot of every layer's parameters.
    pub fn params(&self) -> Vec<LayerParams> {
        self.layers.iter().map(|l| l.params().clone()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params().tensors().iter().all(|t| t.all_finite()))
    }
}

impl Embedder for Network {
    fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.infer(images)
    }

    fn ensure_ready(&self) -> Result<()> {
        if !self.all_finite() {
            return Err(Error::State("network has non-finite parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Siamese,
    Matching,
}

/// A trainable embedding network plus bookkeeping.
///
/// Both Siamese branches run through the single `network`, so there is
/// exactly one copy of every weight.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub network: Network,
    pub seed: u64,
    /// Optimizer steps applied so far.
    pub steps: usize,
}

pub type SiameseModel = Model;
pub type MatchingModel = Model;

impl Model {
    pub fn new(kind: ModelKind, spec: NetworkSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            kind,
            network: Network::new(spec, seed)?,
            seed,
            steps: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.network.spec()
    }

    /// Runs both inputs through the shared network in one batch, keeping the
    /// caches for [`Model::siamese_backward`].
    pub fn siamese_forward(&mut self, x1: &Tensor, x2: &Tensor) -> Result<(Tensor, Tensor)> {
        if x1.shape() != x2.shape() {
            return Err(Error::Dimension(format!(
                "twin inputs differ: {:?} vs {:?}",
                x1.shape(),
                x2.shape()
            )));
        }
        let n = x1.dim(0)?;
        let both = Tensor::concat(&[x1, x2])?;
        let out = self.network.forward(&both)?;
        Ok(out.split_at(n))
    }

    /// Backpropagates gradients for both branches of the last
    /// [`Model::siamese_forward`]; contributions add in the shared weights.
    pub fn siamese_backward(&mut self, grad_e1: &Tensor, grad_e2: &Tensor) -> Result<()> {
        let g = Tensor::concat(&[grad_e1, grad_e2])?;
        self.network.backward(&g)?;
        Ok(())
    }
}

impl Embedder for Model {
    fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.network.infer(images)
    }

    fn ensure_ready(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::State("model has not been trained".into()));
        }
        self.network.ensure_ready()
    }
}

pub fn build_mnist_siamese(activation: Activation, kaf: KafConfig, seed: u64) -> Result<SiameseModel> {
    Model::new(ModelKind::Siamese, mnist_spec(activation, kaf), seed)
}

pub fn build_att_siamese(activation: Activation, kaf: KafConfig, seed: u64) -> Result<SiameseModel> {
    Model::new(ModelKind::Siamese, att_spec(activation, kaf), seed)
}

pub fn build_matching_embedder(activation: Activation, kaf: KafConfig) -> NetworkSpec {
    matching_spec(activation, kaf)
}

pub fn build_matching(activation: Activation, kaf: KafConfig, seed: u64) -> Result<MatchingModel> {
    Model::new(ModelKind::Matching, matching_spec(activation, kaf), seed)
}

/// Probability over the distinct support classes, in ascending class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub classes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    /// Most probable class; ties go to the smaller class id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        self.classes[best]
    }

    pub fn prob(&self, class: usize) -> Option<f64> {
        self.classes.iter().position(|&c| c == class).map(|i| self.probs[i])
    }
}

struct Attention {
    norms: Vec<f64>,
    query_norm: f64,
    cosines: Vec<f64>,
    weights: Vec<f64>,
    dist: ClassDistribution,
}

fn attend(support: &Tensor, labels: &[usize], query: &[f64]) -> Result<Attention> {
    support.expect_rank(2, "support embeddings")?;
    let (s, e) = (support.shape()[0], support.shape()[1]);
    if s == 0 {
        return Err(Error::Parameter("empty support set".into()));
    }
    if labels.len() != s {
        return Err(Error::Dimension(format!("{} labels for {s} support items", labels.len())));
    }
    if query.len() != e {
        return Err(Error::Dimension(format!("query has {} dims, support has {e}", query.len())));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let query_norm = norm(query);
    if query_norm == 0.0 {
        return Err(Error::Numeric("query embedding has zero norm".into()));
    }
    let mut norms = Vec::with_capacity(s);
    let mut cosines = Vec::with_capacity(s);
    for i in 0..s {
        let item = support.item(i);
        let n = norm(item);
        if n == 0.0 {
            return Err(Error::Numeric(format!("support embedding {i} has zero norm")));
        }
        let dot: f64 = item.iter().zip(query).map(|(a, b)| a * b).sum();
        norms.push(n);
        cosines.push(dot / (n * query_norm));
    }
    let max = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = cosines.iter().map(|c| (c - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|x| x / z).collect();

    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut probs = vec![0.0; classes.len()];
    for (w, l) in weights.iter().zip(labels) {
        let k = classes.binary_search(l).expect("label present");
        probs[k] += w;
    }
    Ok(Attention {
        norms,
        query_norm,
        cosines,
        weights,
        dist: ClassDistribution { classes, probs },
    })
}

/// Softmax attention over cosine similarities between `query` and each
/// support embedding, summed per class.
pub fn matching_forward(support: &Tensor, labels: &[usize], query: &[f64]) -> Result<ClassDistribution> {
    Ok(attend(support, labels, query)?.dist)
}

/// Negative log-likelihood of `target` under [`matching_forward`], with
/// gradients for the support embeddings and the query.
#[derive(Debug, Clone)]
pub struct MatchingLoss {
    pub loss: f64,
    pub grad_support: Tensor,
    pub grad_query: Vec<f64>,
    pub correct: bool,
}

pub fn matching_nll(support: &Tensor, labels: &[usize], query: &[f64], target: usize) -> Result<MatchingLoss> {
    let att = attend(support, labels, query)?;
    let p_target = att
        .dist
        .prob(target)
        .ok_or_else(|| Error::Parameter(format!("query class {target} is not in the support set")))?;
    let e = query.len();
    let mut grad_support = Tensor::zeros(support.shape());
    let mut grad_query = vec![0.0; e];
    // dL/dcosᵢ = aᵢ (1 − [lᵢ = target] / p_target)
    for i in 0..labels.len() {
        let hit = if labels[i] == target { 1.0 / p_target } else { 0.0 };
        let g = att.weights[i] * (1.0 - hit);
        if g == 0.0 {
            continue;
        }
        let item = support.item(i);
        let (ns, nq, cos) = (att.norms[i], att.query_norm, att.cosines[i]);
        let gs = &mut grad_support.data_mut()[i * e..(i + 1) * e];
        for k in 0..e {
            grad_query[k] += g * (item[k] / (ns * nq) - cos * query[k] / (nq * nq));
            gs[k] += g * (query[k] / (ns * nq) - cos * item[k] / (ns * ns));
        }
    }
    Ok(MatchingLoss {
        loss: -p_target.ln(),
        grad_support,
        grad_query,
        correct: att.dist.argmax() == target,
    })
}

pub const CHECKPOINT_FORMAT: &str = "kaf-oneshot-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model container (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub seed: u64,
    pub steps: usize,
    pub spec: NetworkSpec,
    pub params: Vec<LayerParams>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: model.kind,
            seed: model.seed,
            steps: model.steps,
            spec: model.spec().clone(),
            params: model.network.params(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::format(0, format!("not a checkpoint: format '{}'", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::format(0, format!("unsupported checkpoint version {}", self.version)));
        }
        Ok(Model {
            kind: self.model,
            network: Network::from_params(self.spec, self.params)?,
            seed: self.seed,
            steps: self.steps,
        })
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &Checkpoint::from_model(model))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    ckpt.into_model()
}
