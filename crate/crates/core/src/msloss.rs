//! Multi-similarity loss over a sub-batch: cosine similarity matrix, pair
//! mining, the loss itself, and its analytic gradient with respect to the
//! embeddings.
//!
//! Mining is treated as non-differentiable: pair sets are frozen per step,
//! and the gradient is exact for the loss with those sets held fixed. The
//! reduction over anchors is the mean over anchors that contributed at
//! least one mined pair, which keeps the magnitude batch-size-invariant
//! and makes a lone violating pair carry its full closed-form value.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::batch::{SubBatch, TrainingIteration, SUB_BATCHES_PER_ITERATION};
use crate::error::{Error, Result};
use crate::trainer::EmbeddingTable;

/// Scales and margins of the multi-similarity loss.
///
/// The conventional defaults below are not prescribed by the training
/// recipe; they are the commonly used values for this loss family and are
/// fully configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsParams {
    /// Positive-pair scale (soft weighting sharpness for positives).
    pub alpha: f64,
    /// Negative-pair scale.
    pub beta: f64,
    /// Similarity margin both terms are measured against.
    pub lambda: f64,
    /// Mining margin.
    pub epsilon: f64,
}

impl Default for MsParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 50.0,
            lambda: 0.5,
            epsilon: 0.1,
        }
    }
}

impl MsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidInput(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidInput(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.lambda.is_finite() && self.lambda > -1.0 && self.lambda < 1.0) {
            return Err(Error::InvalidInput(format!(
                "lambda must lie in (-1, 1), got {}",
                self.lambda
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Mined pair indices, one entry per anchor (row of the similarity matrix).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorPairs {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl AnchorPairs {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

/// Per-anchor mined positive and negative index lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSets {
    anchors: Vec<AnchorPairs>,
}

impl PairSets {
    /// Validates no self-pairs and no index in both lists of one anchor.
    pub fn new(anchors: Vec<AnchorPairs>) -> Result<Self> {
        for (i, a) in anchors.iter().enumerate() {
            if a.positives.contains(&i) || a.negatives.contains(&i) {
                return Err(Error::InvalidInput(format!(
                    "anchor {i} lists itself as a pair"
                )));
            }
            if a.positives.iter().any(|p| a.negatives.contains(p)) {
                return Err(Error::InvalidInput(format!(
                    "anchor {i} lists an index as both positive and negative"
                )));
            }
        }
        Ok(Self { anchors })
    }

    pub fn anchors(&self) -> &[AnchorPairs] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// True when no anchor carries any mined pair.
    pub fn all_empty(&self) -> bool {
        self.anchors.iter().all(AnchorPairs::is_empty)
    }
}

/// Cosine similarity matrix of unit-norm embedding rows: `S = E E^T`.
pub fn pairwise_similarity(embeddings: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    for (i, row) in embeddings.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "embedding row {i} is not unit-norm (norm {norm})"
            )));
        }
    }
    Ok(embeddings.dot(&embeddings.t()))
}

/// Applies the mining rule to a similarity matrix.
///
/// For each anchor: negatives survive if harder than the easiest positive
/// minus the margin, positives survive if harder than the hardest negative
/// plus the margin. Anchors with no positives or no negatives in the batch
/// contribute empty sets.
pub fn mine_pairs(similarity: ArrayView2<'_, f64>, labels: &[u64], params: &MsParams) -> Result<PairSets> {
    let n = similarity.nrows();
    if similarity.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "similarity matrix must be square, got {}x{}",
            n,
            similarity.ncols()
        )));
    }
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "labels length {} does not match matrix size {n}",
            labels.len()
        )));
    }
    params.validate()?;

    let mut anchors = Vec::with_capacity(n);
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        if positives.is_empty() || negatives.is_empty() {
            anchors.push(AnchorPairs::default());
            continue;
        }
        let min_pos = positives
            .iter()
            .map(|&p| similarity[(i, p)])
            .fold(f64::INFINITY, f64::min);
        let max_neg = negatives
            .iter()
            .map(|&nn| similarity[(i, nn)])
            .fold(f64::NEG_INFINITY, f64::max);
        anchors.push(AnchorPairs {
            positives: positives
                .into_iter()
                .filter(|&p| similarity[(i, p)] < max_neg + params.epsilon)
                .collect(),
            negatives: negatives
                .into_iter()
                .filter(|&nn| similarity[(i, nn)] > min_pos - params.epsilon)
                .collect(),
        });
    }
    PairSets::new(anchors)
}

/// `ln(1 + sum(exp(x_k)))` with the max shifted out for stability, plus the
/// softmax-style weights `exp(x_j) / (1 + sum(exp(x_k)))`.
fn log1p_sum_exp_with_weights(xs: &[f64]) -> (f64, Vec<f64>) {
    debug_assert!(!xs.is_empty());
    let m = xs.iter().copied().fold(0.0f64, f64::max);
    let mut denom = (-m).exp();
    let shifted: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let e = (x - m).exp();
            denom += e;
            e
        })
        .collect();
    let value = m + denom.ln();
    let weights = shifted.into_iter().map(|e| e / denom).collect();
    (value, weights)
}

fn check_similarity(similarity: ArrayView2<'_, f64>, pairs: &PairSets) -> Result<()> {
    let n = similarity.nrows();
    if similarity.ncols() != n || pairs.len() != n {
        return Err(Error::InvalidInput(format!(
            "pair sets ({} anchors) inconsistent with similarity matrix ({n}x{})",
            pairs.len(),
            similarity.ncols()
        )));
    }
    if similarity.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("similarity matrix contains NaN".into()));
    }
    for (i, a) in pairs.anchors().iter().enumerate() {
        if a.positives.iter().chain(a.negatives.iter()).any(|&j| j >= n) {
            return Err(Error::InvalidInput(format!(
                "anchor {i} references an index outside the batch"
            )));
        }
    }
    Ok(())
}

/// Per-anchor loss terms (zero for anchors with empty mined sets).
pub fn ms_loss_terms(
    similarity: ArrayView2<'_, f64>,
    pairs: &PairSets,
    params: &MsParams,
) -> Result<Vec<f64>> {
    check_similarity(similarity, pairs)?;
    params.validate()?;
    let mut terms = Vec::with_capacity(pairs.len());
    for (i, anchor) in pairs.anchors().iter().enumerate() {
        let mut term = 0.0;
        if !anchor.positives.is_empty() {
            let xs: Vec<f64> = anchor
                .positives
                .iter()
                .map(|&p| -params.alpha * (similarity[(i, p)] - params.lambda))
                .collect();
            term += log1p_sum_exp_with_weights(&xs).0 / params.alpha;
        }
        if !anchor.negatives.is_empty() {
            let xs: Vec<f64> = anchor
                .negatives
                .iter()
                .map(|&nn| params.beta * (similarity[(i, nn)] - params.lambda))
                .collect();
            term += log1p_sum_exp_with_weights(&xs).0 / params.beta;
        }
        terms.push(term);
    }
    Ok(terms)
}

/// The multi-similarity loss for a similarity matrix and mined pair sets:
/// mean over contributing anchors of the soft positive and negative terms.
/// Zero when every mined set is empty.
pub fn ms_loss(
    similarity: ArrayView2<'_, f64>,
    pairs: &PairSets,
    params: &MsParams,
) -> Result<f64> {
    let terms = ms_loss_terms(similarity, pairs, params)?;
    let contributing = pairs
        .anchors()
        .iter()
        .filter(|a| !a.is_empty())
        .count();
    if contributing == 0 {
        return Ok(0.0);
    }
    Ok(terms.iter().sum::<f64>() / contributing as f64)
}

/// Loss and exact gradient with the mined pair sets held fixed.
///
/// The gradient is taken through the dot products of `S = E E^T`;
/// normalization of the embeddings is the upstream model's business.
pub fn ms_loss_and_grad_given_pairs(
    embeddings: ArrayView2<'_, f64>,
    similarity: ArrayView2<'_, f64>,
    pairs: &PairSets,
    params: &MsParams,
) -> Result<(f64, Array2<f64>)> {
    check_similarity(similarity, pairs)?;
    params.validate()?;
    let (n, dim) = embeddings.dim();
    if n != similarity.nrows() {
        return Err(Error::InvalidInput(format!(
            "embeddings rows {n} do not match similarity size {}",
            similarity.nrows()
        )));
    }

    let contributing = pairs.anchors().iter().filter(|a| !a.is_empty()).count();
    let mut grad = Array2::<f64>::zeros((n, dim));
    if contributing == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / contributing as f64;

    let mut total = 0.0;
    for (i, anchor) in pairs.anchors().iter().enumerate() {
        if !anchor.positives.is_empty() {
            let xs: Vec<f64> = anchor
                .positives
                .iter()
                .map(|&p| -params.alpha * (similarity[(i, p)] - params.lambda))
                .collect();
            let (value, weights) = log1p_sum_exp_with_weights(&xs);
            total += value / params.alpha;
            for (&p, w) in anchor.positives.iter().zip(weights) {
                // d/dS_ip of (1/a) ln(1 + sum exp(-a (S - l))) = -w.
                let coeff = -w * scale;
                accumulate_pair_grad(&mut grad, embeddings, i, p, coeff);
            }
        }
        if !anchor.negatives.is_empty() {
            let xs: Vec<f64> = anchor
                .negatives
                .iter()
                .map(|&nn| params.beta * (similarity[(i, nn)] - params.lambda))
                .collect();
            let (value, weights) = log1p_sum_exp_with_weights(&xs);
            total += value / params.beta;
            for (&nn, w) in anchor.negatives.iter().zip(weights) {
                let coeff = w * scale;
                accumulate_pair_grad(&mut grad, embeddings, i, nn, coeff);
            }
        }
    }
    Ok((total * scale, grad))
}

fn accumulate_pair_grad(
    grad: &mut Array2<f64>,
    embeddings: ArrayView2<'_, f64>,
    i: usize,
    j: usize,
    coeff: f64,
) {
    for d in 0..embeddings.ncols() {
        grad[(i, d)] += coeff * embeddings[(j, d)];
        grad[(j, d)] += coeff * embeddings[(i, d)];
    }
}

/// Mines pairs from the embeddings' similarity matrix and returns the exact
/// gradient of the loss with those sets frozen.
pub fn ms_loss_grad(
    embeddings: ArrayView2<'_, f64>,
    labels: &[u64],
    params: &MsParams,
) -> Result<Array2<f64>> {
    let similarity = pairwise_similarity(embeddings)?;
    let pairs = mine_pairs(similarity.view(), labels, params)?;
    let (_, grad) = ms_loss_and_grad_given_pairs(embeddings, similarity.view(), &pairs, params)?;
    Ok(grad)
}

/// Mines and evaluates the loss for one sub-batch of table embeddings.
pub fn sub_batch_loss(
    sub_batch: &SubBatch,
    table: &EmbeddingTable,
    params: &MsParams,
) -> Result<f64> {
    let ids: Vec<u64> = sub_batch.image_ids().collect();
    let embeddings = table.gather(&ids)?;
    let labels = sub_batch.labels();
    let similarity = pairwise_similarity(embeddings.view())?;
    let pairs = mine_pairs(similarity.view(), &labels, params)?;
    ms_loss(similarity.view(), &pairs, params)
}

/// Total and per-sub-batch losses for a training iteration. The total is
/// the plain sum of the six sub-batch losses in canonical sub-batch order,
/// every call.
pub fn iteration_loss(
    iteration: &TrainingIteration,
    table: &EmbeddingTable,
    params: &MsParams,
) -> Result<(f64, [f64; SUB_BATCHES_PER_ITERATION])> {
    let mut per = [0.0; SUB_BATCHES_PER_ITERATION];
    for (k, sb) in iteration.sub_batches().iter().enumerate() {
        per[k] = sub_batch_loss(sb, table, params)?;
    }
    let total = per.iter().sum();
    Ok((total, per))
}
