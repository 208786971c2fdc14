//! Embedding-space evaluation: silhouette score and pairwise similarity reports.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::losses::embedding_distance;
use crate::models::Embedder;
use crate::tensor::Tensor;

/// Embeddings `[N, E]` with one class id per row.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub points: Tensor,
    pub labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(points: Tensor, labels: Vec<usize>) -> Result<Self> {
        points.expect_rank(2, "embedding set")?;
        if points.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} labels",
                points.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { points, labels })
    }
}

/// Mean silhouette coefficient over all points, in `[−1, 1]`.
///
/// For point `i` with mean intra-cluster distance `a` and smallest mean
/// distance `b` to another cluster, `s = (b − a) / max(a, b)`. Points in
/// singleton clusters score 0, as does `a = b = 0`.
pub fn silhouette_score(es: &EmbeddingSet) -> Result<f64> {
    let n = es.labels.len();
    if n < 2 {
        return Err(Error::Metric(format!("silhouette needs at least 2 points, got {n}")));
    }
    let mut index = BTreeMap::new();
    for &l in &es.labels {
        let next = index.len();
        index.entry(l).or_insert(next);
    }
    let k = index.len();
    if k < 2 {
        return Err(Error::Metric("silhouette needs at least 2 distinct labels".into()));
    }
    let cluster: Vec<usize> = es.labels.iter().map(|l| index[l]).collect();
    let mut sizes = vec![0usize; k];
    for &c in &cluster {
        sizes[c] += 1;
    }

    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        if sizes[cluster[i]] == 1 {
            continue;
        }
        sums.fill(0.0);
        let pi = es.points.item(i);
        for j in 0..n {
            if j != i {
                sums[cluster[j]] += embedding_distance(pi, es.points.item(j))?;
            }
        }
        let own = cluster[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Dissimilarity `D_w` of every image pair under `model`, in input order.
pub fn similarity_report<M: Embedder + ?Sized>(pairs: &[(Tensor, Tensor)], model: &M) -> Result<Vec<f64>> {
    model.ensure_ready()?;
    pairs
        .iter()
        .map(|(a, b)| {
            let ea = model.embed(a)?;
            let eb = model.embed(b)?;
            embedding_distance(ea.data(), eb.data())
        })
        .collect()
}

/// Writes `pair_id,dissimilarity` rows.
pub fn write_similarity_csv<W: Write>(mut out: W, scores: &[f64]) -> Result<()> {
    writeln!(out, "pair_id,dissimilarity")?;
    for (i, s) in scores.iter().enumerate() {
        writeln!(out, "{i},{s}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(points: Vec<f64>, dim: usize, labels: Vec<usize>) -> EmbeddingSet {
        let n = labels.len();
        EmbeddingSet::new(Tensor::new(vec![n, dim], points).unwrap(), labels).unwrap()
    }

    /// Straight transcription of the definition, no shared helpers.
    pub(crate) fn silhouette_oracle(points: &[Vec<f64>], labels: &[usize]) -> f64 {
        let n = points.len();
        let dist = |i: usize, j: usize| -> f64 {
            points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let mut s = 0.0;
        for i in 0..n {
            let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if own.is_empty() {
                continue;
            }
            let a = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
            let mut b = f64::INFINITY;
            for &c in classes.iter().filter(|&&c| c != labels[i]) {
                let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                let m = other.iter().map(|&j| dist(i, j)).sum::<f64>() / other.len() as f64;
                b = b.min(m);
            }
            if a.max(b) > 0.0 {
                s += (b - a) / a.max(b);
            }
        }
        s / n as f64
    }

    #[test]
    fn well_separated_clusters_score_one() {
        let es = set(vec![0.0, 0.0, 10.0, 10.0], 1, vec![0, 0, 1, 1]);
        assert_eq!(silhouette_score(&es).unwrap(), 1.0);
    }

    #[test]
    fn identical_points_score_zero() {
        let es = set(vec![1.0; 8], 2, vec![0, 1, 0, 1]);
        assert_eq!(silhouette_score(&es).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_an_error() {
        let es = set(vec![0.0, 1.0, 2.0], 1, vec![4, 4, 4]);
        assert!(matches!(silhouette_score(&es), Err(Error::Metric(_))));
        let es = set(vec![0.0], 1, vec![0]);
        assert!(matches!(silhouette_score(&es), Err(Error::Metric(_))));
    }

    #[test]
    fn singleton_clusters_contribute_zero() {
        let es = set(vec![0.0, 0.0, 5.0], 1, vec![0, 0, 1]);
        // Both members of cluster 0 score 1, the singleton scores 0.
        assert!((silhouette_score(&es).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matches_definition_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..20 {
            let points: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
            let es = set(points.concat(), 3, labels.clone());
            let got = silhouette_score(&es).unwrap();
            assert!((got - silhouette_oracle(&points, &labels)).abs() <= 1e-12);
        }
    }

    fn cloud() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (prop::collection::vec(-5.0..5.0f64, 24), prop::collection::vec(0usize..3, 12)).prop_filter(
            "at least two labels",
            |(_, l)| l.iter().any(|&x| x != l[0]),
        )
    }

    proptest! {
        #[test]
        fn bounded_and_similarity_invariant((pts, labels) in cloud(), shift in -10.0..10.0f64,
                                            angle in 0.0..6.28f64, scale in 0.1..10.0f64) {
            let base = silhouette_score(&set(pts.clone(), 2, labels.clone())).unwrap();
            prop_assert!((-1.0..=1.0).contains(&base));
            let (c, s) = (angle.cos(), angle.sin());
            let moved: Vec<f64> = pts
                .chunks(2)
                .flat_map(|p| {
                    let (x, y) = (p[0], p[1]);
                    [scale * (c * x - s * y) + shift, scale * (s * x + c * y) - shift]
                })
                .collect();
            let other = silhouette_score(&set(moved, 2, labels)).unwrap();
            prop_assert!((base - other).abs() < 1e-9);
        }
    }

    /// Embeds an image as its first two pixels, or as a constant.
    struct Probe {
        collapse: bool,
    }

    impl Embedder for Probe {
        fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
            let n = images.dim(0)?;
            let per = images.len() / n;
            let data = (0..n)
                .flat_map(|i| {
                    let row = &images.data()[i * per..i * per + 2];
                    if self.collapse { [1.0, 1.0] } else { [row[0], row[1]] }
                })
                .collect();
            Tensor::new(vec![n, 2], data)
        }
    }

    fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Tensor, Tensor)> {
        (0..n)
            .map(|_| (Tensor::randn(&[1, 2, 2], 0.0, 1.0, rng), Tensor::randn(&[1, 2, 2], 0.0, 1.0, rng)))
            .collect()
    }

    #[test]
    fn collapsed_embedder_reports_zero() {
        let pairs = random_pairs(&mut ChaCha8Rng::seed_from_u64(1), 6);
        let scores = similarity_report(&pairs, &Probe { collapse: true }).unwrap();
        assert_eq!(scores, vec![0.0; 6]);
    }

    #[test]
    fn report_follows_pair_order_and_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs = random_pairs(&mut rng, 8);
        let probe = Probe { collapse: false };
        let scores = similarity_report(&pairs, &probe).unwrap();
        for ((a, b), s) in pairs.iter().zip(&scores) {
            let want = embedding_distance(&a.data()[..2], &b.data()[..2]).unwrap();
            assert_eq!(*s, want);
        }
        let mut perm: Vec<usize> = (0..pairs.len()).collect();
        perm.reverse();
        let shuffled: Vec<_> = perm.iter().map(|&i| pairs[i].clone()).collect();
        let again = similarity_report(&shuffled, &probe).unwrap();
        assert_eq!(again, perm.iter().map(|&i| scores[i]).collect::<Vec<_>>());
    }

    #[test]
    fn csv_header_and_rows() {
        let mut buf = Vec::new();
        write_similarity_csv(&mut buf, &[0.0, 1.5]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "pair_id,dissimilarity\n0,0\n1,1.5\n");
    }
}
