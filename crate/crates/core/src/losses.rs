//! Pairwise contrastive loss and the embedding distance it is built on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default contrastive margin.
pub const DEFAULT_MARGIN: f64 = 2.0;

/// Pair label: `Similar` is encoded as 0 and `Dissimilar` as 1, so that
/// `(1 − y)` selects the attraction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

impl PairLabel {
    pub fn value(self) -> u8 {
        match self {
            PairLabel::Similar => 0,
            PairLabel::Dissimilar => 1,
        }
    }
}

impl From<PairLabel> for u8 {
    fn from(y: PairLabel) -> u8 {
        y.value()
    }
}

impl TryFrom<u8> for PairLabel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(PairLabel::Similar),
            1 => Ok(PairLabel::Dissimilar),
            other => Err(Error::Parameter(format!("pair label must be 0 or 1, got {other}"))),
        }
    }
}

/// Euclidean distance `‖e1 − e2‖₂`.
pub fn embedding_distance(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::Dimension(format!(
            "embedding extents differ: {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    Ok(e1.iter().zip(e2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Loss value and gradients for a single pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_e1: Vec<f64>,
    pub grad_e2: Vec<f64>,
}

/// `(1 − y)·½D² + y·½·max(0, m − D)²` with `D = ‖e1 − e2‖`.
///
/// At `D = 0` the dissimilar-branch gradient is taken to be zero.
pub fn contrastive_loss(e1: &[f64], e2: &[f64], y: PairLabel, margin: f64) -> Result<PairLoss> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::Parameter(format!("margin must be positive, got {margin}")));
    }
    let dist = embedding_distance(e1, e2)?;
    let diff: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| a - b).collect();
    let (loss, scale) = match y {
        PairLabel::Similar => (0.5 * dist * dist, 1.0),
        PairLabel::Dissimilar => {
            let hinge = (margin - dist).max(0.0);
            // d/dD ½(m − D)² = −(m − D); dD/de1 = diff / D.
            let scale = if hinge > 0.0 && dist > 0.0 { -hinge / dist } else { 0.0 };
            (0.5 * hinge * hinge, scale)
        }
    };
    let grad_e1: Vec<f64> = diff.iter().map(|d| scale * d).collect();
    let grad_e2 = grad_e1.iter().map(|g| -g).collect();
    Ok(PairLoss { loss, grad_e1, grad_e2 })
}

/// Mean contrastive loss over a batch of embedding pairs `[B, E]`, with
/// gradients of that mean with respect to both embedding tensors.
pub fn batch_contrastive_loss(
    e1: &Tensor,
    e2: &Tensor,
    labels: &[PairLabel],
    margin: f64,
) -> Result<(f64, Tensor, Tensor)> {
    e1.expect_rank(2, "contrastive e1")?;
    e2.expect_shape(e1.shape(), "contrastive e2")?;
    let b = e1.shape()[0];
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for a batch of {b}", labels.len())));
    }
    if b == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    let inv = 1.0 / b as f64;
    let mut total = 0.0;
    let mut g1 = Vec::with_capacity(e1.len());
    let mut g2 = Vec::with_capacity(e2.len());
    for (i, &y) in labels.iter().enumerate() {
        let pair = contrastive_loss(e1.item(i), e2.item(i), y, margin)?;
        total += pair.loss;
        g1.extend(pair.grad_e1.iter().map(|g| g * inv));
        g2.extend(pair.grad_e2.iter().map(|g| g * inv));
    }
    Ok((
        total * inv,
        Tensor::new(e1.shape().to_vec(), g1)?,
        Tensor::new(e2.shape().to_vec(), g2)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, max_relative_error};
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        assert_eq!(embedding_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(embedding_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(embedding_distance(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(matches!(embedding_distance(&[0.0], &[0.0, 1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn contrastive_examples() {
        let same = contrastive_loss(&[0.3, -1.0], &[0.3, -1.0], PairLabel::Similar, 2.0).unwrap();
        assert_eq!(same.loss, 0.0);
        assert!(same.grad_e1.iter().chain(&same.grad_e2).all(|&g| g == 0.0));

        let far = contrastive_loss(&[0.0, 0.0], &[3.0, 4.0], PairLabel::Dissimilar, 2.0).unwrap();
        assert_eq!(far.loss, 0.0);
        assert!(far.grad_e1.iter().chain(&far.grad_e2).all(|&g| g == 0.0));

        let collapsed = contrastive_loss(&[1.0, 1.0], &[1.0, 1.0], PairLabel::Dissimilar, 2.0).unwrap();
        assert_eq!(collapsed.loss, 2.0);
        assert!(collapsed.grad_e1.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_non_positive_margin() {
        assert!(contrastive_loss(&[0.0], &[1.0], PairLabel::Similar, 0.0).is_err());
    }

    #[test]
    fn label_encoding() {
        assert_eq!(serde_json::to_string(&PairLabel::Dissimilar).unwrap(), "1");
        assert_eq!(serde_json::from_str::<PairLabel>("0").unwrap(), PairLabel::Similar);
        assert!(serde_json::from_str::<PairLabel>("2").is_err());
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0..3.0f64, len)
    }

    proptest! {
        #[test]
        fn loss_is_non_negative_and_zero_only_when_satisfied(
            e1 in vec_strategy(4), e2 in vec_strategy(4), dissimilar in any::<bool>(), margin in 0.1..4.0f64,
        ) {
            let y = if dissimilar { PairLabel::Dissimilar } else { PairLabel::Similar };
            let out = contrastive_loss(&e1, &e2, y, margin).unwrap();
            prop_assert!(out.loss >= 0.0);
            let d = embedding_distance(&e1, &e2).unwrap();
            let satisfied = match y {
                PairLabel::Similar => d == 0.0,
                PairLabel::Dissimilar => d >= margin,
            };
            prop_assert_eq!(out.loss == 0.0, satisfied);
        }

        #[test]
        fn gradients_match_finite_differences_away_from_kinks(
            e1 in vec_strategy(3), e2 in vec_strategy(3), dissimilar in any::<bool>(),
        ) {
            let margin = 2.0;
            let y = if dissimilar { PairLabel::Dissimilar } else { PairLabel::Similar };
            let d = embedding_distance(&e1, &e2).unwrap();
            prop_assume!(d > 1e-3 && (d - margin).abs() > 1e-3);
            let out = contrastive_loss(&e1, &e2, y, margin).unwrap();
            let x = Tensor::vector(e1.clone());
            let fd = finite_difference_grad(
                |t| Ok(contrastive_loss(t.data(), &e2, y, margin)?.loss), &x, 1e-5,
            ).unwrap();
            prop_assert!(max_relative_error(&Tensor::vector(out.grad_e1.clone()), &fd) < 1e-4);
        }

        #[test]
        fn distance_triangle_inequality(a in vec_strategy(5), b in vec_strategy(5), c in vec_strategy(5)) {
            let ab = embedding_distance(&a, &b).unwrap();
            let bc = embedding_distance(&b, &c).unwrap();
            let ac = embedding_distance(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn batch_loss_is_mean_of_pairs() {
        let e1 = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![2, 2], vec![3.0, 4.0, 1.0, 0.5]).unwrap();
        let labels = [PairLabel::Similar, PairLabel::Dissimilar];
        let (loss, g1, _) = batch_contrastive_loss(&e1, &e2, &labels, 2.0).unwrap();
        let expected = 0.5 * (0.5 * 25.0 + 0.5 * 1.5f64.powi(2));
        assert!((loss - expected).abs() < 1e-12);
        assert_eq!(&g1.data()[..2], &[-1.5, -2.0]);
    }
}
