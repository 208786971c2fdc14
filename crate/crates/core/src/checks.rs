//! Self-checks behind the `gradcheck` and `psdcheck` commands: every
//! analytic backward pass against central finite differences, and the
//! smallest Gram-matrix eigenvalue of KAF dictionaries.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_grad, worst_relative_error};
use crate::kaf::{make_dictionary, min_gram_eigenvalue, PSD_TOLERANCE};
use crate::layer::{KafConfig, LayerSpec, LayerState};
use crate::losses::{batch_contrastive_loss, embedding_distance, PairLabel};
use crate::models::matching_nll;
use crate::tensor::Tensor;

/// Pass threshold on the max relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Finite-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const DEFAULT_SEEDS: usize = 20;

/// Everything the gradient suite exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Conv2d,
    MaxPool2d,
    Linear,
    Relu,
    Kaf,
    Kaf2d,
    Contrastive,
    MatchingNll,
}

impl CheckKind {
    pub const ALL: [CheckKind; 8] = [
        CheckKind::Conv2d,
        CheckKind::MaxPool2d,
        CheckKind::Linear,
        CheckKind::Relu,
        CheckKind::Kaf,
        CheckKind::Kaf2d,
        CheckKind::Contrastive,
        CheckKind::MatchingNll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Conv2d => "conv2d",
            CheckKind::MaxPool2d => "maxpool2d",
            CheckKind::Linear => "linear",
            CheckKind::Relu => "relu",
            CheckKind::Kaf => "kaf",
            CheckKind::Kaf2d => "kaf2d",
            CheckKind::Contrastive => "contrastive",
            CheckKind::MatchingNll => "matching_nll",
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = CheckKind::ALL.iter().map(|k| k.name()).collect();
            Error::Parameter(format!("unknown layer '{s}' (valid: {})", names.join(", ")))
        })
    }
}

/// Worst gradient mismatch found for one kind across all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub kind: CheckKind,
    pub max_error: f64,
    pub worst_seed: u64,
    /// Which gradient the worst element belongs to (`input`, `param 0`, ...).
    pub worst_tensor: String,
    pub worst_index: usize,
    pub seeds: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_error < GRADCHECK_TOLERANCE
    }
}

/// One analytic/numeric gradient pair.
struct Pair {
    name: String,
    analytic: Tensor,
    numeric: Tensor,
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn suite_kaf() -> KafConfig {
    KafConfig {
        size: 7,
        bound: 2.0,
        ..KafConfig::default()
    }
}

/// Random input for `kind`, kept away from the non-differentiable points:
/// ReLU inputs avoid a band around 0, pooling windows get well-separated values.
fn layer_case(kind: CheckKind, rng: &mut ChaCha8Rng) -> (LayerSpec, Tensor) {
    match kind {
        CheckKind::Conv2d => (
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: rng.random_range(1..=2),
            },
            Tensor::randn(&[2, 2, 5, 5], 0.0, 1.0, rng),
        ),
        CheckKind::MaxPool2d => {
            let n = 2 * 2 * 4 * 4;
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(&mut order[..], rng);
            let data = order.iter().map(|&r| r as f64 * 0.1 - 3.0).collect();
            (LayerSpec::MaxPool2d { window: 2 }, Tensor::new(vec![2, 2, 4, 4], data).expect("shape"))
        }
        CheckKind::Linear => (LayerSpec::Linear { inputs: 5, outputs: 4 }, Tensor::randn(&[3, 5], 0.0, 1.0, rng)),
        CheckKind::Relu => {
            let x = Tensor::randn(&[3, 6], 0.0, 1.0, rng).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
            (LayerSpec::Relu, x)
        }
        CheckKind::Kaf => (LayerSpec::Kaf { channels: 3 }, Tensor::randn(&[2, 3, 2, 2], 0.0, 1.0, rng)),
        CheckKind::Kaf2d => (LayerSpec::Kaf2d { channels: 4 }, Tensor::randn(&[3, 4], 0.0, 1.0, rng)),
        CheckKind::Contrastive | CheckKind::MatchingNll => unreachable!("not a layer"),
    }
}

fn layer_pairs(kind: CheckKind, rng: &mut ChaCha8Rng) -> Result<Vec<Pair>> {
    let (spec, x) = layer_case(kind, rng);
    let mut layer = LayerState::init(spec, &suite_kaf(), rng)?;
    // Move biases and KAF mixing weights off their init values so every
    // parameter gradient is exercised.
    for t in layer.params_mut().tensors_mut() {
        let noise = Tensor::randn(t.shape(), 0.0, 0.5, rng);
        t.add_scaled(&noise, 1.0)?;
    }
    let y = layer.forward(&x)?;
    let probe = Tensor::randn(y.shape(), 0.0, 1.0, rng);
    let gx = layer.backward(&probe)?;
    let frozen = layer.clone();
    let mut pairs = vec![Pair {
        name: "input".into(),
        numeric: finite_difference_grad(|t| Ok(dot(&frozen.infer(t)?, &probe)), &x, GRADCHECK_STEP)?,
        analytic: gx,
    }];
    for (k, g) in layer.grads().iter().enumerate() {
        let numeric = finite_difference_grad(
            |t| {
                let mut l = frozen.clone();
                *l.params_mut().tensors_mut()[k] = t.clone();
                Ok(dot(&l.infer(&x)?, &probe))
            },
            frozen.params().tensors()[k],
            GRADCHECK_STEP,
        )?;
        pairs.push(Pair {
            name: format!("param {k}"),
            analytic: g.clone(),
            numeric,
        });
    }
    Ok(pairs)
}

fn contrastive_pairs(rng: &mut ChaCha8Rng) -> Result<Vec<Pair>> {
    let margin = 2.0;
    let (b, e) = (4, 3);
    // Redraw until no pair sits on a kink (D = 0 or D = m).
    let (e1, e2) = loop {
        let e1 = Tensor::randn(&[b, e], 0.0, 1.0, rng);
        let e2 = Tensor::randn(&[b, e], 0.0, 1.0, rng);
        let clear = (0..b).all(|i| {
            let d = embedding_distance(e1.item(i), e2.item(i)).unwrap_or(0.0);
            d > 1e-3 && (d - margin).abs() > 1e-3
        });
        if clear {
            break (e1, e2);
        }
    };
    let labels: Vec<PairLabel> = (0..b)
        .map(|i| if i % 2 == 0 { PairLabel::Similar } else { PairLabel::Dissimilar })
        .collect();
    let (_, g1, g2) = batch_contrastive_loss(&e1, &e2, &labels, margin)?;
    let n1 = finite_difference_grad(|t| Ok(batch_contrastive_loss(t, &e2, &labels, margin)?.0), &e1, GRADCHECK_STEP)?;
    let n2 = finite_difference_grad(|t| Ok(batch_contrastive_loss(&e1, t, &labels, margin)?.0), &e2, GRADCHECK_STEP)?;
    Ok(vec![
        Pair {
            name: "e1".into(),
            analytic: g1,
            numeric: n1,
        },
        Pair {
            name: "e2".into(),
            analytic: g2,
            numeric: n2,
        },
    ])
}

fn matching_pairs(rng: &mut ChaCha8Rng) -> Result<Vec<Pair>> {
    let support = Tensor::randn(&[6, 4], 0.0, 1.0, rng);
    let labels = vec![0, 1, 2, 0, 1, 2];
    let query = Tensor::randn(&[4], 0.0, 1.0, rng);
    let target = rng.random_range(0..3);
    let out = matching_nll(&support, &labels, query.data(), target)?;
    let ns = finite_difference_grad(|t| Ok(matching_nll(t, &labels, query.data(), target)?.loss), &support, GRADCHECK_STEP)?;
    let nq = finite_difference_grad(|t| Ok(matching_nll(&support, &labels, t.data(), target)?.loss), &query, GRADCHECK_STEP)?;
    Ok(vec![
        Pair {
            name: "support".into(),
            analytic: out.grad_support,
            numeric: ns,
        },
        Pair {
            name: "query".into(),
            analytic: Tensor::vector(out.grad_query),
            numeric: nq,
        },
    ])
}

/// Runs the finite-difference comparison for `kind` over seeds
/// `0..seeds`. `corrupt` perturbs the first analytic element by +1 to
/// demonstrate that the harness catches a wrong gradient.
pub fn gradcheck_kind(kind: CheckKind, seeds: usize, corrupt: bool) -> Result<GradReport> {
    if seeds == 0 {
        return Err(Error::Parameter("gradcheck needs at least one seed".into()));
    }
    let mut report = GradReport {
        kind,
        max_error: 0.0,
        worst_seed: 0,
        worst_tensor: String::new(),
        worst_index: 0,
        seeds,
    };
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x100) ^ kind as u64);
        let mut pairs = match kind {
            CheckKind::Contrastive => contrastive_pairs(&mut rng)?,
            CheckKind::MatchingNll => matching_pairs(&mut rng)?,
            _ => layer_pairs(kind, &mut rng)?,
        };
        if corrupt {
            pairs[0].analytic.data_mut()[0] += 1.0;
        }
        for p in &pairs {
            let (err, idx) = worst_relative_error(&p.analytic, &p.numeric);
            if err > report.max_error || report.worst_tensor.is_empty() {
                report.max_error = err;
                report.worst_seed = seed;
                report.worst_tensor = p.name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

/// Every kind in [`CheckKind::ALL`]; `corrupt` names at most one kind to sabotage.
pub fn gradcheck_suite(seeds: usize, corrupt: Option<CheckKind>) -> Result<Vec<GradReport>> {
    CheckKind::ALL
        .into_iter()
        .map(|k| gradcheck_kind(k, seeds, corrupt == Some(k)))
        .collect()
}

/// Smallest Gram eigenvalue for a size-`d` dictionary on `[−bound, bound]`.
/// A single centre has the 1×1 Gram matrix `[1]`.
pub fn dictionary_min_eigenvalue(d: usize, bound: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::Parameter("dictionary size must be positive".into()));
    }
    if d == 1 {
        return min_gram_eigenvalue(&[vec![0.0]], 1.0);
    }
    let dict = make_dictionary(d, bound)?;
    let centers: Vec<Vec<f64>> = dict.points.iter().map(|&p| vec![p]).collect();
    min_gram_eigenvalue(&centers, dict.gamma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdReport {
    pub size: usize,
    pub min_eigenvalue: f64,
}

impl PsdReport {
    pub fn passed(&self) -> bool {
        self.min_eigenvalue >= PSD_TOLERANCE
    }
}

pub fn psdcheck(sizes: &[usize], bound: f64) -> Result<Vec<PsdReport>> {
    if sizes.is_empty() {
        return Err(Error::Parameter("no dictionary sizes given".into()));
    }
    sizes
        .iter()
        .map(|&size| {
            Ok(PsdReport {
                size,
                min_eigenvalue: dictionary_min_eigenvalue(size, bound)?,
            })
        })
        .collect()
}
