//! Retrieval and fidelity metrics over a pluggable motion featurizer.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::motion::{Block, MotionSequence};
use crate::rng;
use crate::tape::Mat;

/// Maps a motion to a fixed-length vector.
pub trait Featurizer: Send + Sync {
    fn featurize(&self, motion: &MotionSequence) -> Vec<f64>;
}

/// Per-column mean, standard deviation and mean absolute frame delta,
/// grouped block by block.
#[derive(Debug, Clone, Copy, Default)]
pub struct StatFeaturizer;

impl Featurizer for StatFeaturizer {
    fn featurize(&self, motion: &MotionSequence) -> Vec<f64> {
        let frames = motion.frames();
        let layout = motion.layout();
        let mut out = Vec::with_capacity(3 * motion.dim());
        for block in Block::ALL {
            let view = frames.slice(ndarray::s![.., layout.block_range(block)]);
            block_stats(view, &mut out);
        }
        out
    }
}

fn block_stats(view: ArrayView2<f64>, out: &mut Vec<f64>) {
    let f = view.nrows() as f64;
    for col in view.axis_iter(Axis(1)) {
        let mean = col.sum() / f;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f;
        let delta = if col.len() > 1 {
            col.windows(2).into_iter().map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (f - 1.0)
        } else {
            0.0
        };
        out.extend([mean, var.sqrt(), delta]);
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Batch,
    FullSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Percentage of queries whose target ranks within the top k.
    pub r_at: BTreeMap<usize, f64>,
    pub avg_rank: f64,
    pub batch_size: usize,
    pub scope: Scope,
    pub queries: usize,
}

/// Ranks each `generated[i]` against the target candidates of its batch.
///
/// Batches come from a seeded shuffle of the indices; a trailing remainder
/// forms a smaller final batch. Ties in cosine similarity are broken by
/// position in a seeded shuffle of each batch's candidates.
pub fn retrieval_metrics(
    generated: &[MotionSequence],
    targets: &[MotionSequence],
    scope: Scope,
    batch_size: usize,
    featurizer: &dyn Featurizer,
    seed: u64,
    exec: Execution,
) -> Result<RetrievalReport> {
    if generated.is_empty() {
        return Err(Error::Input("retrieval needs at least one pair".into()));
    }
    if generated.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} generated motions but {} targets",
            generated.len(),
            targets.len()
        )));
    }
    let q = exec.map(generated, |m| featurizer.featurize(m));
    let c = exec.map(targets, |m| featurizer.featurize(m));
    retrieval_from_features(&q, &c, scope, batch_size, seed)
}

pub fn retrieval_from_features(
    queries: &[Vec<f64>],
    candidates: &[Vec<f64>],
    scope: Scope,
    batch_size: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let n = queries.len();
    if n == 0 || candidates.len() != n {
        return Err(Error::Input("retrieval needs equal, nonempty query and candidate lists".into()));
    }
    let mut rng = rng::substream(seed, "retrieval");
    let batches: Vec<Vec<usize>> = match scope {
        Scope::FullSet => vec![(0..n).collect()],
        Scope::Batch => {
            if batch_size == 0 || batch_size > n {
                return Err(Error::Input(format!("batch size {batch_size} invalid for {n} pairs")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order.chunks(batch_size).map(<[usize]>::to_vec).collect()
        }
    };
    let mut ranks = Vec::with_capacity(n);
    for batch in &batches {
        let mut tie_order = batch.clone();
        tie_order.shuffle(&mut rng);
        for &i in batch {
            let sims: Vec<(f64, usize)> = tie_order
                .iter()
                .enumerate()
                .map(|(pos, &j)| (cosine(&queries[i], &candidates[j]), pos))
                .collect();
            let own = sims[tie_order.iter().position(|&j| j == i).unwrap()];
            let better = sims
                .iter()
                .filter(|&&(s, pos)| s > own.0 || (s == own.0 && pos < own.1))
                .count();
            ranks.push(better + 1);
        }
    }
    let r_at = [1, 2, 3]
        .into_iter()
        .map(|k| (k, 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64))
        .collect();
    Ok(RetrievalReport {
        r_at,
        avg_rank: ranks.iter().sum::<usize>() as f64 / n as f64,
        batch_size: if scope == Scope::Batch { batch_size } else { n },
        scope,
        queries: n,
    })
}

fn position_view(m: &MotionSequence) -> Result<ArrayView2<'_, f64>> {
    if m.layout().position_dims == 0 {
        return Err(Error::Input("layout has no position block".into()));
    }
    m.slice_block(Block::Position)
}

/// Mean per-frame Euclidean distance on the position block. With
/// `truncate`, unequal lengths are compared over the common prefix.
pub fn l2_distance(generated: &MotionSequence, target: &MotionSequence, truncate: bool) -> Result<f64> {
    l2_masked(generated, target, truncate, None)
}

/// Like [`l2_distance`] but averaged only over frames where `mask` is true.
pub fn l2_distance_masked(generated: &MotionSequence, target: &MotionSequence, mask: &[bool]) -> Result<f64> {
    l2_masked(generated, target, false, Some(mask))
}

fn l2_masked(a: &MotionSequence, b: &MotionSequence, truncate: bool, mask: Option<&[bool]>) -> Result<f64> {
    if a.layout() != b.layout() {
        return Err(Error::Layout("motions have different layouts".into()));
    }
    if a.len() != b.len() && !truncate {
        return Err(Error::Input(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    let (pa, pb) = (position_view(a)?, position_view(b)?);
    let f = a.len().min(b.len());
    if let Some(mask) = mask {
        if mask.len() != f {
            return Err(Error::Input(format!("mask length {} for {f} frames", mask.len())));
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..f {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let d: f64 = pa.row(i).iter().zip(pb.row(i)).map(|(x, y)| (x - y).powi(2)).sum();
        sum += d.sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("no frames selected".into()));
    }
    Ok(sum / count as f64)
}

/// Diagonal term added to both covariances.
pub const FID_REGULARIZATION: f64 = 1e-6;

fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 feature vectors, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Input("feature vectors must share a nonzero length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..d {
        cov[(i, i)] += FID_REGULARIZATION;
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite eigenvalue in covariance".into()));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fit to two feature sets.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu1, s1) = gaussian_fit(a)?;
    let (mu2, s2) = gaussian_fit(b)?;
    if mu1.len() != mu2.len() {
        return Err(Error::Input("feature sets have different widths".into()));
    }
    if SymmetricEigen::new(s1.clone()).eigenvalues.min() <= 0.0 || SymmetricEigen::new(s2.clone()).eigenvalues.min() <= 0.0 {
        return Err(Error::Numerical("covariance not positive definite after regularization".into()));
    }
    let r1 = sym_sqrt(&s1)?;
    let cross = sym_sqrt(&(&r1 * &s2 * &r1))?;
    let value = (&mu1 - &mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite Fréchet distance".into()));
    }
    Ok(value.max(0.0))
}

pub fn fid_like(
    generated: &[MotionSequence],
    reference: &[MotionSequence],
    featurizer: &dyn Featurizer,
    exec: Execution,
) -> Result<f64> {
    let a = exec.map(generated, |m| featurizer.featurize(m));
    let b = exec.map(reference, |m| featurizer.featurize(m));
    fid_from_features(&a, &b)
}

/// Fraction of rows whose argmax matches the label.
pub fn classification_accuracy(logits: &Mat, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Input(format!("{} logit rows for {} labels", logits.nrows(), labels.len())));
    }
    let correct = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
            best.0 == label
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Report written by the evaluate command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub r_at: BTreeMap<usize, f64>,
    pub avg_rank: f64,
    pub retrieval: RetrievalReport,
    pub l2: f64,
    pub fid: Option<f64>,
    pub classification_accuracy: f64,
    /// How unequal generated and target lengths were reconciled.
    pub truncation: String,
    /// Reserved for externally computed critic scores.
    #[serde(default)]
    pub m_score: Option<f64>,
    pub config_hash: Option<String>,
}
