//! Text-to-motion evaluation metrics over feature matrices: FID, pool-based
//! R-Precision, MM-Dist, Diversity and MModality.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng;
use crate::tensor_grad::Tensor;

/// Ridge added to both covariances when either is near-singular.
pub const FID_RIDGE: f64 = 1e-6;
/// Smallest covariance eigenvalue tolerated without the ridge.
pub const FID_EIGEN_FLOOR: f64 = 1e-10;

/// Rows of features, optionally labelled by the text that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    matrix: Tensor,
    labels: Option<Vec<String>>,
}

impl FeatureSet {
    pub fn new(matrix: Tensor) -> Result<Self> {
        matrix.dims2()?;
        ensure!(matrix.rows() >= 1, "feature set is empty");
        ensure!(matrix.is_finite(), "features contain non-finite values");
        Ok(Self { matrix, labels: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "feature set is empty");
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        ensure!(labels.len() == self.len(), "{} labels for {} samples", labels.len(), self.len());
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.dim();
        &self.matrix.data()[i * f..(i + 1) * f]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Rows grouped by label, in label order.
    pub fn groups(&self) -> Result<BTreeMap<&str, Vec<usize>>> {
        let labels = self.labels.as_ref().ok_or_else(|| crate::error::contract("feature set has no group labels"))?;
        let mut out: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            out.entry(l.as_str()).or_default().push(i);
        }
        Ok(out)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean and population (1/n) covariance.
fn moments(set: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let (n, f) = (set.len(), set.dim());
    let x = DMatrix::from_row_slice(n, f, set.matrix.data());
    let mean = x.row_mean().transpose();
    let centred = DMatrix::from_fn(n, f, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    (mean, cov)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Symmetric square root through the eigendecomposition, negative eigenvalues floored at 0.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    ensure!(a.dim() == b.dim(), "feature widths differ: {} vs {}", a.dim(), b.dim());
    ensure!(a.len() >= 2 && b.len() >= 2, "FID needs at least two samples per set");
    let f = a.dim();
    let (mu_a, mut cov_a) = moments(a);
    let (mu_b, mut cov_b) = moments(b);
    if min_eigenvalue(&cov_a) < FID_EIGEN_FLOOR || min_eigenvalue(&cov_b) < FID_EIGEN_FLOOR {
        cov_a += DMatrix::identity(f, f) * FID_RIDGE;
        cov_b += DMatrix::identity(f, f) * FID_RIDGE;
    }
    let s = sqrt_psd(&cov_a);
    let mut inner = &s * &cov_b * &s;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RPrecision {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
}

/// For each motion, ranks its own text feature against `pool − 1` seeded
/// candidates whose text feature differs from the true one. A candidate
/// outranks the true text only when strictly closer.
pub fn r_precision(motion: &FeatureSet, text: &FeatureSet, pool: usize, seed: u64) -> Result<RPrecision> {
    ensure!(pool >= 2, "pool size must be at least 2, got {pool}");
    ensure!(motion.len() == text.len(), "{} motion features but {} text features", motion.len(), text.len());
    ensure!(motion.dim() == text.dim(), "motion and text features differ in width");
    let n = motion.len();
    ensure!(n >= pool, "R-Precision with pool {pool} needs at least {pool} samples, got {n}");
    let mut hits = [0usize; 3];
    for i in 0..n {
        let own = text.row(i);
        let eligible: Vec<usize> = (0..n).filter(|&j| j != i && text.row(j) != own).collect();
        ensure!(
            eligible.len() >= pool - 1,
            "sample {i} has only {} mismatched candidates, pool {pool} needs {}",
            eligible.len(),
            pool - 1
        );
        let mut r = rng::indexed_stream(seed, "r-precision", i as u64);
        let picks = index::sample(&mut r, eligible.len(), pool - 1);
        let d_true = euclidean(motion.row(i), own);
        let closer = picks.iter().filter(|&k| euclidean(motion.row(i), text.row(eligible[k])) < d_true).count();
        for (k, h) in hits.iter_mut().enumerate() {
            if closer <= k {
                *h += 1;
            }
        }
    }
    let frac = |h: usize| h as f64 / n as f64;
    Ok(RPrecision { top1: frac(hits[0]), top2: frac(hits[1]), top3: frac(hits[2]) })
}

/// Mean distance between each motion feature and its paired text feature.
pub fn mm_dist(motion: &FeatureSet, text: &FeatureSet) -> Result<f64> {
    ensure!(motion.len() == text.len(), "{} motion features but {} text features", motion.len(), text.len());
    ensure!(motion.dim() == text.dim(), "motion and text features differ in width");
    let total: f64 = (0..motion.len()).map(|i| euclidean(motion.row(i), text.row(i))).sum();
    Ok(total / motion.len() as f64)
}

/// Mean distance between two disjoint seeded subsets of size `subset`, matched element-wise.
pub fn diversity(feats: &FeatureSet, subset: usize, seed: u64) -> Result<f64> {
    ensure!(subset >= 1, "subset size must be positive");
    ensure!(feats.len() >= 2 * subset, "Diversity with subset {subset} needs at least {} samples, got {}", 2 * subset, feats.len());
    let mut idx: Vec<usize> = (0..feats.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "diversity"));
    let total: f64 = (0..subset).map(|k| euclidean(feats.row(idx[k]), feats.row(idx[subset + k]))).sum();
    Ok(total / subset as f64)
}

/// Per label group, mean distance over `pairs` seeded pairs of distinct
/// members; averaged over groups.
pub fn mmodality(feats: &FeatureSet, pairs: usize, seed: u64) -> Result<f64> {
    ensure!(pairs >= 1, "pairs per group must be positive");
    let groups = feats.groups()?;
    let mut total = 0.0;
    for (g, (label, members)) in groups.iter().enumerate() {
        ensure!(members.len() >= 2, "group `{label}` has a single member");
        let mut r = rng::indexed_stream(seed, "mmodality", g as u64);
        let mut acc = 0.0;
        for _ in 0..pairs {
            let a = r.random_range(0..members.len());
            let mut b = r.random_range(0..members.len() - 1);
            if b >= a {
                b += 1;
            }
            acc += euclidean(feats.row(members[a]), feats.row(members[b]));
        }
        total += acc / pairs as f64;
    }
    Ok(total / groups.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `Γ((F+1)/2) / Γ(F/2)` by stepping `Γ(x + 1/2)/Γ(x)` down to `x ≤ 1`.
    fn gamma_ratio(f: usize) -> f64 {
        let mut x = f as f64 / 2.0;
        let mut factor = 1.0;
        while x > 1.0 {
            factor *= (x - 0.5) / (x - 1.0);
            x -= 1.0;
        }
        let base = if (x - 1.0).abs() < 1e-12 {
            std::f64::consts::PI.sqrt() / 2.0
        } else {
            1.0 / std::f64::consts::PI.sqrt()
        };
        base * factor
    }

    fn gaussian(seed: u64, n: usize, f: usize, std: f64, shift: &[f64]) -> FeatureSet {
        let mut r = rng::stream(seed, "gauss");
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..f).map(|j| shift[j] + std * rng::standard_normal(&mut r)).collect()).collect();
        FeatureSet::from_rows(&rows).unwrap()
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let x = gaussian(1, 500, 8, 1.0, &[0.0; 8]);
        assert!(fid(&x, &x).unwrap() < 1e-6);
        let rows: Vec<Vec<f64>> = (0..x.len()).chain(0..x.len()).map(|i| x.row(i).to_vec()).collect();
        let doubled = FeatureSet::from_rows(&rows).unwrap();
        assert!(fid(&x, &doubled).unwrap() < 1e-6);
    }

    #[test]
    fn fid_matches_analytic_gaussians() {
        let d = [1.0, -0.5, 0.0, 2.0, 0.0, 0.0, 0.5, 1.0];
        let d2: f64 = d.iter().map(|v| v * v).sum();
        let a = gaussian(2, 10_000, 8, 1.0, &[0.0; 8]);
        let b = gaussian(3, 10_000, 8, 1.0, &d);
        let v = fid(&a, &b).unwrap();
        assert!((v / d2 - 1.0).abs() < 0.05, "{v} vs {d2}");

        let a = gaussian(4, 10_000, 2, 2.0, &[0.0; 2]);
        let b = gaussian(5, 10_000, 2, 1.0, &[0.0; 2]);
        let v = fid(&a, &b).unwrap();
        assert!((v / 2.0 - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn fid_is_symmetric_and_regularizes_degenerate_sets() {
        let a = gaussian(6, 300, 6, 1.0, &[0.0; 6]);
        let b = gaussian(7, 200, 6, 1.5, &[0.3; 6]);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
        // Fewer samples than dimensions: singular covariance.
        let c = gaussian(8, 3, 6, 1.0, &[0.0; 6]);
        let v = fid(&c, &b).unwrap();
        assert!(v.is_finite() && v >= 0.0);
        let nan = Tensor::from_parts(vec![1, 2], vec![f64::NAN, 0.0]);
        assert!(FeatureSet::new(nan).is_err());
        assert!(fid(&a, &gaussian(1, 10, 3, 1.0, &[0.0; 3])).is_err());
    }

    #[test]
    fn r_precision_identity_pairing_is_perfect() {
        let x = gaussian(9, 64, 8, 1.0, &[0.0; 8]);
        let r = r_precision(&x, &x, 8, 1).unwrap();
        assert_eq!((r.top1, r.top2, r.top3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn r_precision_swapped_pairs_score_zero() {
        let m = FeatureSet::from_rows(&[vec![0.0, 0.0], vec![10.0, 0.0]]).unwrap();
        let t = FeatureSet::from_rows(&[vec![10.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let r = r_precision(&m, &t, 2, 3).unwrap();
        assert_eq!(r.top1, 0.0);
        assert_eq!(r.top2, 1.0);
        assert!(r_precision(&m, &t, 1, 3).is_err());
        assert!(r_precision(&m, &t, 3, 3).is_err());
    }

    #[test]
    fn r_precision_is_chance_on_independent_features() {
        let (n, p) = (2048, 32);
        let m = gaussian(10, n, 8, 1.0, &[0.0; 8]);
        let t = gaussian(11, n, 8, 1.0, &[0.0; 8]);
        let r = r_precision(&m, &t, p, 5).unwrap();
        let chance = 1.0 / p as f64;
        let se = (chance * (1.0 - chance) / n as f64).sqrt();
        assert!((r.top1 - chance).abs() < 3.0 * se, "{} vs {chance} ± {se}", r.top1);
        assert!(r.top1 <= r.top2 && r.top2 <= r.top3);
    }

    #[test]
    fn r_precision_skips_candidates_sharing_the_text() {
        // Two rows per text: each sample has two mismatched candidates, pool 4 needs three.
        let t = FeatureSet::from_rows(&[vec![0.0], vec![0.0], vec![1.0], vec![1.0]]).unwrap();
        assert!(r_precision(&t, &t, 4, 0).is_err());
        assert_eq!(r_precision(&t, &t, 3, 0).unwrap().top1, 1.0);
        assert_eq!(r_precision(&t, &t, 2, 0).unwrap().top1, 1.0);
    }

    #[test]
    fn mm_dist_oracles() {
        let x = gaussian(12, 50, 4, 1.0, &[0.0; 4]);
        assert_eq!(mm_dist(&x, &x).unwrap(), 0.0);
        let d = [3.0, 0.0, -4.0, 0.0];
        let rows: Vec<Vec<f64>> = (0..50).map(|i| x.row(i).iter().zip(d).map(|(a, b)| a + b).collect()).collect();
        let y = FeatureSet::from_rows(&rows).unwrap();
        assert!((mm_dist(&x, &y).unwrap() - 5.0).abs() < 1e-12);
        let z = gaussian(13, 50, 4, 1.0, &[0.0; 4]);
        let mut naive = 0.0;
        for i in 0..50 {
            let mut s = 0.0;
            for j in 0..4 {
                s += (x.row(i)[j] - z.row(i)[j]).powi(2);
            }
            naive += s.sqrt();
        }
        assert!((mm_dist(&x, &z).unwrap() - naive / 50.0).abs() < 1e-12);
        assert!(mm_dist(&x, &gaussian(1, 49, 4, 1.0, &[0.0; 4])).is_err());
    }

    #[test]
    fn diversity_oracles() {
        let same = FeatureSet::from_rows(&vec![vec![1.0, 2.0]; 10]).unwrap();
        assert_eq!(diversity(&same, 5, 1).unwrap(), 0.0);
        assert!(diversity(&same, 6, 1).is_err());
        let x = gaussian(14, 400, 8, 1.0, &[0.0; 8]);
        assert_eq!(diversity(&x, 100, 3).unwrap(), diversity(&x, 100, 3).unwrap());
        // ‖x − y‖ with x, y ~ N(0, I_F) has mean 2·Γ((F+1)/2)/Γ(F/2).
        let expect = 2.0 * gamma_ratio(8);
        let mean: f64 = (0..10).map(|s| diversity(&gaussian(100 + s, 200, 8, 1.0, &[0.0; 8]), 100, s).unwrap()).sum::<f64>() / 10.0;
        assert!((mean / expect - 1.0).abs() < 0.05, "{mean} vs {expect}");
    }

    #[test]
    fn gamma_ratio_matches_known_values() {
        // Γ(1)/Γ(1/2), Γ(3/2)/Γ(1), Γ(9/2)/Γ(4) = (105/16)√π / 6.
        assert!((gamma_ratio(1) - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
        assert!((gamma_ratio(2) - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-15);
        assert!((gamma_ratio(8) - 105.0 / 16.0 * std::f64::consts::PI.sqrt() / 6.0).abs() < 1e-12);
    }

    #[test]
    fn mmodality_oracles() {
        let rows = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![1.0, 1.0], vec![1.0, 2.0]];
        let labels = vec!["a".into(), "a".into(), "b".into(), "b".into()];
        let x = FeatureSet::from_rows(&rows).unwrap().with_labels(labels).unwrap();
        let v = mmodality(&x, 7, 1).unwrap();
        assert!((v - (5.0 + 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(v, mmodality(&x, 7, 1).unwrap());
        let same = FeatureSet::from_rows(&vec![vec![2.0]; 4]).unwrap().with_labels(vec!["a".into(); 4]).unwrap();
        assert_eq!(mmodality(&same, 5, 2).unwrap(), 0.0);
        let single = FeatureSet::from_rows(&[vec![0.0], vec![1.0], vec![2.0]])
            .unwrap()
            .with_labels(vec!["a".into(), "a".into(), "b".into()])
            .unwrap();
        assert!(mmodality(&single, 3, 0).is_err());
        assert!(mmodality(&FeatureSet::from_rows(&rows).unwrap(), 3, 0).is_err());
    }
}
