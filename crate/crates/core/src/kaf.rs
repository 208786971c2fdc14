//! Kernel activation functions.
//!
//! A KAF replaces a fixed nonlinearity with a learnable mixture of Gaussian
//! kernels centred on a fixed dictionary:
//!
//! ```text
//! g(s) = Σᵢ αᵢ · exp(−γ (s − dᵢ)²)
//! ```
//!
//! Only the mixing coefficients `α` are trained; the dictionary `d` and the
//! bandwidth `γ` are fixed at construction. The two-dimensional variant acts
//! on pairs of activations `(s₀, s₁)` and mixes `D²` kernels centred on the
//! Cartesian grid `d × d`.
//!
//! Activation tensors are `[N, C, ...]`; channel `c` selects the alpha row
//! when coefficients are per-channel. Rank-1 tensors are a single channel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the default random alpha initialization.
pub const ALPHA_INIT_STD: f64 = 0.3;
/// Ridge term used when fitting alpha to a target shape.
pub const FIT_RIDGE: f64 = 1e-4;
/// Tolerance on the smallest Gram eigenvalue.
pub const PSD_TOLERANCE: f64 = -1e-8;

/// Evenly spaced kernel centres and the matching bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub points: Vec<f64>,
    pub gamma: f64,
}

/// `size` points evenly spaced on `[−bound, bound]`, with `γ = 1 / (2Δ²)`
/// where `Δ` is the spacing.
pub fn make_dictionary(size: usize, bound: f64) -> Result<Dictionary> {
    if size < 2 {
        return Err(Error::Parameter(format!("dictionary size must be at least 2, got {size}")));
    }
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::Parameter(format!("dictionary bound must be positive, got {bound}")));
    }
    let step = 2.0 * bound / (size - 1) as f64;
    let points = (0..size)
        .map(|i| {
            // Mirror the upper half so the grid is exactly symmetric about 0.
            let j = size - 1 - i;
            if i <= j {
                -bound + i as f64 * step
            } else {
                bound - j as f64 * step
            }
        })
        .collect();
    Ok(Dictionary {
        points,
        gamma: 1.0 / (2.0 * step * step),
    })
}

#[inline]
pub fn gaussian(s: f64, center: f64, gamma: f64) -> f64 {
    let d = s - center;
    (-gamma * d * d).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KafKind {
    /// One input per output, `D` coefficients.
    #[serde(rename = "kaf")]
    OneD,
    /// Consecutive channel pairs `(2k, 2k+1)` per output, `D²` coefficients.
    #[serde(rename = "kaf2d")]
    TwoD,
}

/// Parameters of one KAF activation layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKafParams")]
pub struct KafParams {
    kind: KafKind,
    dictionary: Vec<f64>,
    gamma: f64,
    /// `[rows, D]` or `[rows, D²]`; `rows` is the output channel count when
    /// per-channel, otherwise 1.
    alpha: Tensor,
    per_channel: bool,
}

#[derive(Deserialize)]
struct RawKafParams {
    kind: KafKind,
    dictionary: Vec<f64>,
    gamma: f64,
    alpha: Tensor,
    per_channel: bool,
}

impl TryFrom<RawKafParams> for KafParams {
    type Error = Error;

    fn try_from(raw: RawKafParams) -> Result<Self> {
        KafParams::new(raw.kind, raw.dictionary, raw.gamma, raw.alpha, raw.per_channel)
    }
}

fn validate_dictionary(points: &[f64]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Parameter("empty dictionary".into()));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::Parameter("dictionary contains non-finite points".into()));
    }
    if points.len() < 2 {
        return Ok(());
    }
    let step = points[1] - points[0];
    if step <= 0.0 {
        return Err(Error::Parameter("dictionary must be strictly increasing".into()));
    }
    for w in points.windows(2) {
        let gap = w[1] - w[0];
        if gap <= 0.0 {
            return Err(Error::Parameter("dictionary must be strictly increasing".into()));
        }
        if (gap - step).abs() > 1e-9 * step.max(1.0) {
            return Err(Error::Parameter("dictionary must be evenly spaced".into()));
        }
    }
    Ok(())
}

impl KafParams {
    pub fn new(kind: KafKind, dictionary: Vec<f64>, gamma: f64, alpha: Tensor, per_channel: bool) -> Result<Self> {
        validate_dictionary(&dictionary)?;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Parameter(format!("kernel bandwidth must be positive, got {gamma}")));
        }
        let d = dictionary.len();
        let cols = match kind {
            KafKind::OneD => d,
            KafKind::TwoD => d * d,
        };
        if alpha.rank() != 2 || alpha.shape()[1] != cols || alpha.shape()[0] == 0 {
            return Err(Error::Dimension(format!(
                "alpha must be [rows, {cols}], got {:?}",
                alpha.shape()
            )));
        }
        if !per_channel && alpha.shape()[0] != 1 {
            return Err(Error::Dimension(format!(
                "shared alpha must have one row, got {:?}",
                alpha.shape()
            )));
        }
        Ok(Self {
            kind,
            dictionary,
            gamma,
            alpha,
            per_channel,
        })
    }

    /// Zero-initialized parameters for `units` output channels.
    pub fn zeros(kind: KafKind, dictionary: &Dictionary, units: usize, per_channel: bool) -> Result<Self> {
        let d = dictionary.points.len();
        let cols = match kind {
            KafKind::OneD => d,
            KafKind::TwoD => d * d,
        };
        let rows = if per_channel { units } else { 1 };
        Self::new(
            kind,
            dictionary.points.clone(),
            dictionary.gamma,
            Tensor::zeros(&[rows, cols]),
            per_channel,
        )
    }

    pub fn kind(&self) -> KafKind {
        self.kind
    }

    pub fn dictionary(&self) -> &[f64] {
        &self.dictionary
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    pub fn alpha_mut(&mut self) -> &mut Tensor {
        &mut self.alpha
    }

    /// Replace alpha, keeping its shape.
    pub fn set_alpha(&mut self, alpha: Tensor) -> Result<()> {
        alpha.expect_shape(self.alpha.shape(), "alpha")?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn per_channel(&self) -> bool {
        self.per_channel
    }

    /// Number of kernel centres, `D` or `D²`.
    pub fn terms(&self) -> usize {
        self.alpha.shape()[1]
    }

    fn row(&self, channel: usize) -> &[f64] {
        let r = if self.per_channel { channel } else { 0 };
        let t = self.terms();
        &self.alpha.data()[r * t..(r + 1) * t]
    }

    /// Kernel centres: the dictionary (1-D) or its Cartesian square (2-D),
    /// in alpha-column order.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        match self.kind {
            KafKind::OneD => self.dictionary.iter().map(|&d| vec![d]).collect(),
            KafKind::TwoD => self
                .dictionary
                .iter()
                .flat_map(|&a| self.dictionary.iter().map(move |&b| vec![a, b]))
                .collect(),
        }
    }
}

/// Leading extent, channel count, and per-channel element count of an activation tensor.
fn layout(s: &Tensor) -> (usize, usize, usize) {
    match s.rank() {
        0 => (1, 1, 1),
        1 => (1, 1, s.shape()[0]),
        _ => (s.shape()[0], s.shape()[1], s.shape()[2..].iter().product()),
    }
}

fn check_rows(p: &KafParams, channels: usize) -> Result<()> {
    if p.per_channel && p.alpha.shape()[0] != channels {
        return Err(Error::Dimension(format!(
            "axis 1 (channels): activation has {channels}, alpha has {} rows",
            p.alpha.shape()[0]
        )));
    }
    Ok(())
}

fn expect_kind(p: &KafParams, kind: KafKind) -> Result<()> {
    if p.kind != kind {
        return Err(Error::Parameter(format!("expected {kind:?} parameters, got {:?}", p.kind)));
    }
    Ok(())
}

/// Gradients of a KAF layer.
#[derive(Debug, Clone)]
pub struct KafGrads {
    pub alpha: Tensor,
    pub input: Tensor,
}

/// Element-wise kernel expansion; output shape equals input shape.
pub fn kaf_forward(s: &Tensor, p: &KafParams) -> Result<Tensor> {
    expect_kind(p, KafKind::OneD)?;
    let (n, c, inner) = layout(s);
    check_rows(p, c)?;
    let mut out = Vec::with_capacity(s.len());
    for b in 0..n {
        for ch in 0..c {
            let alpha = p.row(ch);
            let base = (b * c + ch) * inner;
            for &x in &s.data()[base..base + inner] {
                let g: f64 = alpha
                    .iter()
                    .zip(&p.dictionary)
                    .map(|(a, &d)| a * gaussian(x, d, p.gamma))
                    .sum();
                out.push(g);
            }
        }
    }
    Tensor::new(s.shape().to_vec(), out)
}

/// `∂g/∂αᵢ = κ(s, dᵢ)` summed against `upstream`, and
/// `∂g/∂s = Σᵢ αᵢ · (−2γ(s − dᵢ)) · κ(s, dᵢ)`.
pub fn kaf_backward(s: &Tensor, upstream: &Tensor, p: &KafParams) -> Result<KafGrads> {
    expect_kind(p, KafKind::OneD)?;
    upstream.expect_shape(s.shape(), "kaf upstream")?;
    let (n, c, inner) = layout(s);
    check_rows(p, c)?;
    let terms = p.terms();
    let mut grad_alpha = Tensor::zeros(p.alpha.shape());
    let mut grad_s = Vec::with_capacity(s.len());
    let mut kernel = vec![0.0; terms];
    for b in 0..n {
        for ch in 0..c {
            let alpha = p.row(ch);
            let r = if p.per_channel { ch } else { 0 };
            let base = (b * c + ch) * inner;
            for (&x, &u) in s.data()[base..base + inner].iter().zip(&upstream.data()[base..base + inner]) {
                let mut ds = 0.0;
                for (i, &d) in p.dictionary.iter().enumerate() {
                    kernel[i] = gaussian(x, d, p.gamma);
                    ds += alpha[i] * (-2.0 * p.gamma * (x - d)) * kernel[i];
                }
                let ga = &mut grad_alpha.data_mut()[r * terms..(r + 1) * terms];
                for (g, k) in ga.iter_mut().zip(&kernel) {
                    *g += u * k;
                }
                grad_s.push(u * ds);
            }
        }
    }
    Ok(KafGrads {
        alpha: grad_alpha,
        input: Tensor::new(s.shape().to_vec(), grad_s)?,
    })
}

fn pair_layout(s: &Tensor) -> Result<(usize, usize, usize)> {
    if s.rank() < 2 {
        return Err(Error::Dimension(format!(
            "kaf2d needs a channel axis, got shape {:?}",
            s.shape()
        )));
    }
    let (n, c, inner) = layout(s);
    if c % 2 != 0 {
        return Err(Error::Dimension(format!(
            "kaf2d axis 1 (channels): count {c} is odd"
        )));
    }
    Ok((n, c, inner))
}

fn kernel_row(x: f64, p: &KafParams, out: &mut [f64]) {
    for (k, &d) in out.iter_mut().zip(&p.dictionary) {
        *k = gaussian(x, d, p.gamma);
    }
}

/// Combines channel pairs `(2k, 2k+1)` through the `D²`-term 2-D mixture.
/// Output has `C/2` channels.
pub fn kaf2d_forward(s: &Tensor, p: &KafParams) -> Result<Tensor> {
    expect_kind(p, KafKind::TwoD)?;
    let (n, c, inner) = pair_layout(s)?;
    let half = c / 2;
    check_rows(p, half)?;
    let d = p.dictionary.len();
    let mut kx = vec![0.0; d];
    let mut ky = vec![0.0; d];
    let mut out = Vec::with_capacity(s.len() / 2);
    for b in 0..n {
        for k in 0..half {
            let alpha = p.row(k);
            let first = (b * c + 2 * k) * inner;
            let second = first + inner;
            for j in 0..inner {
                kernel_row(s.data()[first + j], p, &mut kx);
                kernel_row(s.data()[second + j], p, &mut ky);
                let mut g = 0.0;
                for (a, kxa) in kx.iter().enumerate() {
                    let row = &alpha[a * d..(a + 1) * d];
                    let inner_sum: f64 = row.iter().zip(&ky).map(|(w, v)| w * v).sum();
                    g += kxa * inner_sum;
                }
                out.push(g);
            }
        }
    }
    let mut shape = s.shape().to_vec();
    shape[1] = half;
    Tensor::new(shape, out)
}

pub fn kaf2d_backward(s: &Tensor, upstream: &Tensor, p: &KafParams) -> Result<KafGrads> {
    expect_kind(p, KafKind::TwoD)?;
    let (n, c, inner) = pair_layout(s)?;
    let half = c / 2;
    check_rows(p, half)?;
    let mut out_shape = s.shape().to_vec();
    out_shape[1] = half;
    upstream.expect_shape(&out_shape, "kaf2d upstream")?;
    let d = p.dictionary.len();
    let terms = p.terms();
    let gamma = p.gamma;
    let mut grad_alpha = Tensor::zeros(p.alpha.shape());
    let mut grad_s = vec![0.0; s.len()];
    let mut kx = vec![0.0; d];
    let mut ky = vec![0.0; d];
    // Kernel derivatives along each component: −2γ(x − dₐ)·κ(x, dₐ).
    let mut dkx = vec![0.0; d];
    let mut dky = vec![0.0; d];
    for b in 0..n {
        for k in 0..half {
            let alpha = p.row(k);
            let r = if p.per_channel { k } else { 0 };
            let first = (b * c + 2 * k) * inner;
            let second = first + inner;
            let up = &upstream.data()[(b * half + k) * inner..(b * half + k + 1) * inner];
            for (j, &u) in up.iter().enumerate() {
                let x = s.data()[first + j];
                let y = s.data()[second + j];
                kernel_row(x, p, &mut kx);
                kernel_row(y, p, &mut ky);
                for a in 0..d {
                    dkx[a] = -2.0 * gamma * (x - p.dictionary[a]) * kx[a];
                    dky[a] = -2.0 * gamma * (y - p.dictionary[a]) * ky[a];
                }
                let ga = &mut grad_alpha.data_mut()[r * terms..(r + 1) * terms];
                let mut gx = 0.0;
                let mut gy = 0.0;
                for a in 0..d {
                    let row = &alpha[a * d..(a + 1) * d];
                    let gar = &mut ga[a * d..(a + 1) * d];
                    let mut with_ky = 0.0;
                    let mut with_dky = 0.0;
                    for bb in 0..d {
                        gar[bb] += u * kx[a] * ky[bb];
                        with_ky += row[bb] * ky[bb];
                        with_dky += row[bb] * dky[bb];
                    }
                    gx += dkx[a] * with_ky;
                    gy += kx[a] * with_dky;
                }
                grad_s[first + j] = u * gx;
                grad_s[second + j] = u * gy;
            }
        }
    }
    Ok(KafGrads {
        alpha: grad_alpha,
        input: Tensor::new(s.shape().to_vec(), grad_s)?,
    })
}

/// Gram matrix `Kᵢⱼ = exp(−γ‖cᵢ − cⱼ‖²)` over arbitrary-dimensional centres.
pub fn gram_matrix(centers: &[Vec<f64>], gamma: f64) -> DMatrix<f64> {
    let n = centers.len();
    DMatrix::from_fn(n, n, |i, j| {
        let sq: f64 = centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        (-gamma * sq).exp()
    })
}

/// Smallest eigenvalue of the kernel Gram matrix over the layer's centres.
///
/// `Σᵢ Σⱼ αᵢ αⱼ κ(dᵢ, dⱼ) = αᵀKα`, so `λ_min(K) ≥ 0` certifies the
/// quadratic form is non-negative for every alpha.
pub fn psd_check(p: &KafParams) -> Result<f64> {
    min_gram_eigenvalue(&p.centers(), p.gamma)
}

pub fn min_gram_eigenvalue(centers: &[Vec<f64>], gamma: f64) -> Result<f64> {
    let k = gram_matrix(centers, gamma);
    let eig = SymmetricEigen::try_new(k, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigen-solver did not converge".into()))?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// How to initialize mixing coefficients.
#[derive(Clone, Copy)]
pub enum AlphaInit<'a> {
    /// i.i.d. normal, mean 0, the given standard deviation.
    Random { std: f64 },
    /// Ridge least squares so that `g(dⱼ) ≈ target(dⱼ)` at every centre.
    FitTarget(&'a dyn Fn(f64) -> f64),
}

/// Coefficients with the same shape as `p.alpha()`. A fitted row is
/// replicated across channels.
pub fn init_alpha(p: &KafParams, init: AlphaInit<'_>, rng: &mut impl Rng) -> Result<Tensor> {
    match init {
        AlphaInit::Random { std } => {
            let normal = Normal::new(0.0, std)
                .map_err(|e| Error::Parameter(format!("alpha init std {std}: {e}")))?;
            Ok(Tensor::from_fn(p.alpha.shape(), |_| normal.sample(rng)))
        }
        AlphaInit::FitTarget(target) => {
            if p.kind != KafKind::OneD {
                return Err(Error::Parameter(
                    "fitting a scalar target is only defined for the 1-D kernel".into(),
                ));
            }
            let row = fit_alpha(&p.dictionary, p.gamma, target)?;
            let rows = p.alpha.shape()[0];
            Tensor::new(p.alpha.shape().to_vec(), row.repeat(rows))
        }
    }
}

/// Solves `(KᵀK + λI) α = Kᵀ t` with `Kⱼᵢ = κ(dⱼ, dᵢ)` and `tⱼ = target(dⱼ)`.
pub fn fit_alpha(dictionary: &[f64], gamma: f64, target: &dyn Fn(f64) -> f64) -> Result<Vec<f64>> {
    let centers: Vec<Vec<f64>> = dictionary.iter().map(|&d| vec![d]).collect();
    let k = gram_matrix(&centers, gamma);
    let t = DVector::from_iterator(dictionary.len(), dictionary.iter().map(|&d| target(d)));
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("target is non-finite on the dictionary".into()));
    }
    let kt = k.transpose();
    let mut normal = &kt * &k;
    for i in 0..dictionary.len() {
        normal[(i, i)] += FIT_RIDGE;
    }
    let rhs = kt * t;
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Numeric("ridge normal equations are not positive definite".into()))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// ELU with unit scale, the usual warm-start shape for KAF coefficients.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}
