//! Associative embedding loss: pulling and pushing terms over body and head embeddings,
//! their weighted combination, and analytic gradients with respect to every embedding.
//!
//! Same-part terms (`bb`, `hh`) sum over ordered index pairs `i != j` and are normalised by
//! `M^2` (resp. `N^2`); the cross-part term (`bh`) sums over all body/head pairs and is
//! normalised by `M * N`. The pull terms weight same-part pairs by `exp(d_ij)` where `d_ij`
//! is the (normalised) box distance. Which pairs enter each sum is controlled by
//! [`PairSelection`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmlError {
    #[error("{part} embedding {index} has dimension {got}, expected {expected}")]
    Dimension { part: &'static str, index: usize, expected: usize, got: usize },
    #[error("{part}: {embeddings} embeddings but {labels} identity labels")]
    LabelCount { part: &'static str, embeddings: usize, labels: usize },
    #[error("{part} distance matrix must be {expected}x{expected}")]
    DistanceShape { part: &'static str, expected: usize },
    #[error("{part} distance matrix invalid at ({i}, {j}): {reason}")]
    Distance { part: &'static str, i: usize, j: usize, reason: &'static str },
    #[error("embedding values must be finite")]
    NonFinite,
    #[error("invalid loss weights: {0}")]
    Weights(&'static str),
}

/// Which index pairs contribute to the pull and push sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSelection {
    /// Pull over same-identity pairs, push over different-identity pairs.
    #[default]
    ByIdentity,
    /// Every pair enters both sums, as the formulas are printed.
    Unrestricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights<T> {
    /// Weight of the same-part (`bb`, `hh`) terms.
    pub mu: T,
    /// Weight of the cross-part (`bh`) term.
    pub beta: T,
    /// Push margin; pairs at least this far apart contribute nothing.
    pub delta: T,
    /// Weight of the pulling loss in the combined objective.
    pub sigma: T,
    /// Weight of the pushing loss in the combined objective.
    pub tau: T,
    #[serde(default)]
    pub pairs: PairSelection,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            mu: T::one(),
            beta: T::lit(1.5),
            delta: T::lit(2.0),
            sigma: T::one(),
            tau: T::one(),
            pairs: PairSelection::ByIdentity,
        }
    }
}

impl<T: Scalar> LossWeights<T> {
    pub fn validate(&self) -> Result<(), AmlError> {
        let nonneg = |v: T| v.is_finite() && v >= T::zero();
        if !(nonneg(self.mu) && nonneg(self.beta) && nonneg(self.sigma) && nonneg(self.tau)) {
            return Err(AmlError::Weights("mu, beta, sigma and tau must be finite and >= 0"));
        }
        if !(self.delta.is_finite() && self.delta > T::zero()) {
            return Err(AmlError::Weights("delta must be finite and > 0"));
        }
        Ok(())
    }
}

/// Labelled body and head embeddings of one image with their pairwise box distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBatch<T> {
    pub body_embeddings: Vec<Vec<T>>,
    pub head_embeddings: Vec<Vec<T>>,
    pub body_identity: Vec<u64>,
    pub head_identity: Vec<u64>,
    pub body_box_distances: Vec<Vec<T>>,
    pub head_box_distances: Vec<Vec<T>>,
}

impl<T: Scalar> LossBatch<T> {
    /// Checks the batch invariants and returns the shared embedding dimension
    /// (`None` when the batch holds no embeddings at all).
    pub fn validate(&self) -> Result<Option<usize>, AmlError> {
        let dim = self.body_embeddings.first().or(self.head_embeddings.first()).map(Vec::len);
        if let Some(d) = dim {
            for (part, set) in [("body", &self.body_embeddings), ("head", &self.head_embeddings)] {
                for (index, e) in set.iter().enumerate() {
                    if e.len() != d || d == 0 {
                        return Err(AmlError::Dimension { part, index, expected: d.max(1), got: e.len() });
                    }
                    if e.iter().any(|v| !v.is_finite()) {
                        return Err(AmlError::NonFinite);
                    }
                }
            }
        }
        for (part, emb, labels, dist) in [
            ("body", &self.body_embeddings, &self.body_identity, &self.body_box_distances),
            ("head", &self.head_embeddings, &self.head_identity, &self.head_box_distances),
        ] {
            if emb.len() != labels.len() {
                return Err(AmlError::LabelCount { part, embeddings: emb.len(), labels: labels.len() });
            }
            let n = emb.len();
            if dist.len() != n || dist.iter().any(|row| row.len() != n) {
                return Err(AmlError::DistanceShape { part, expected: n });
            }
            for i in 0..n {
                if dist[i][i] != T::zero() {
                    return Err(AmlError::Distance { part, i, j: i, reason: "diagonal must be zero" });
                }
                for j in 0..n {
                    let d = dist[i][j];
                    if !d.is_finite() || d < T::zero() {
                        return Err(AmlError::Distance { part, i, j, reason: "entries must be finite and >= 0" });
                    }
                    if d != dist[j][i] {
                        return Err(AmlError::Distance { part, i, j, reason: "matrix must be symmetric" });
                    }
                }
            }
        }
        Ok(dim)
    }

    pub fn body_count(&self) -> usize {
        self.body_embeddings.len()
    }

    pub fn head_count(&self) -> usize {
        self.head_embeddings.len()
    }
}

/// Unweighted per-case sums after normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PartTerms<T> {
    pub bb: T,
    pub hh: T,
    pub bh: T,
}

impl<T: Scalar> PartTerms<T> {
    fn combine(&self, w: &LossWeights<T>) -> T {
        w.mu * (self.bb + self.hh) + w.beta * self.bh
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmlGradient<T> {
    pub body: Vec<Vec<T>>,
    pub head: Vec<Vec<T>>,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn norm_factor<T: Scalar>(a: usize, b: usize) -> T {
    if a == 0 || b == 0 {
        T::zero()
    } else {
        T::one() / (T::from_usize_lossy(a) * T::from_usize_lossy(b))
    }
}

fn pulls(sel: PairSelection, a: u64, b: u64) -> bool {
    sel == PairSelection::Unrestricted || a == b
}

fn pushes(sel: PairSelection, a: u64, b: u64) -> bool {
    sel == PairSelection::Unrestricted || a != b
}

fn hinge<T: Scalar>(delta: T, dist: T) -> T {
    let m = (delta - dist).max(T::zero());
    m * m
}

pub fn pull_terms<T: Scalar>(batch: &LossBatch<T>, sel: PairSelection) -> Result<PartTerms<T>, AmlError> {
    batch.validate()?;
    let same_part = |emb: &[Vec<T>], ids: &[u64], dist: &[Vec<T>]| -> T {
        let n = emb.len();
        let mut acc = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j && pulls(sel, ids[i], ids[j]) {
                    acc = acc + dist[i][j].exp() * sq_dist(&emb[i], &emb[j]);
                }
            }
        }
        acc * norm_factor::<T>(n, n)
    };
    let bb = same_part(&batch.body_embeddings, &batch.body_identity, &batch.body_box_distances);
    let hh = same_part(&batch.head_embeddings, &batch.head_identity, &batch.head_box_distances);
    let mut bh = T::zero();
    for (b, &bid) in batch.body_embeddings.iter().zip(&batch.body_identity) {
        for (h, &hid) in batch.head_embeddings.iter().zip(&batch.head_identity) {
            if pulls(sel, bid, hid) {
                bh = bh + sq_dist(b, h);
            }
        }
    }
    bh = bh * norm_factor::<T>(batch.body_count(), batch.head_count());
    Ok(PartTerms { bb, hh, bh })
}

pub fn push_terms<T: Scalar>(batch: &LossBatch<T>, sel: PairSelection, delta: T) -> Result<PartTerms<T>, AmlError> {
    batch.validate()?;
    let same_part = |emb: &[Vec<T>], ids: &[u64]| -> T {
        let n = emb.len();
        let mut acc = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j && pushes(sel, ids[i], ids[j]) {
                    acc = acc + hinge(delta, sq_dist(&emb[i], &emb[j]).sqrt());
                }
            }
        }
        acc * norm_factor::<T>(n, n)
    };
    let bb = same_part(&batch.body_embeddings, &batch.body_identity);
    let hh = same_part(&batch.head_embeddings, &batch.head_identity);
    let mut bh = T::zero();
    for (b, &bid) in batch.body_embeddings.iter().zip(&batch.body_identity) {
        for (h, &hid) in batch.head_embeddings.iter().zip(&batch.head_identity) {
            if pushes(sel, bid, hid) {
                bh = bh + hinge(delta, sq_dist(b, h).sqrt());
            }
        }
    }
    bh = bh * norm_factor::<T>(batch.body_count(), batch.head_count());
    Ok(PartTerms { bb, hh, bh })
}

/// `mu * (bb + hh) + beta * bh` over the pulling terms.
pub fn pull_loss<T: Scalar>(batch: &LossBatch<T>, weights: &LossWeights<T>) -> Result<T, AmlError> {
    weights.validate()?;
    Ok(pull_terms(batch, weights.pairs)?.combine(weights))
}

/// `mu * (bb + hh) + beta * bh` over the squared-hinge pushing terms.
pub fn push_loss<T: Scalar>(batch: &LossBatch<T>, weights: &LossWeights<T>) -> Result<T, AmlError> {
    weights.validate()?;
    Ok(push_terms(batch, weights.pairs, weights.delta)?.combine(weights))
}

/// `sigma * pull + tau * push`.
pub fn aml_loss<T: Scalar>(batch: &LossBatch<T>, weights: &LossWeights<T>) -> Result<T, AmlError> {
    Ok(weights.sigma * pull_loss(batch, weights)? + weights.tau * push_loss(batch, weights)?)
}

/// Gradient of [`aml_loss`] with respect to every body and head embedding.
///
/// The hinge `max(0, delta - r)^2` has zero gradient for `r >= delta`; coincident
/// embeddings (`r = 0`) in a push pair also receive zero from that pair.
pub fn aml_gradient<T: Scalar>(batch: &LossBatch<T>, weights: &LossWeights<T>) -> Result<AmlGradient<T>, AmlError> {
    weights.validate()?;
    let dim = batch.validate()?.unwrap_or(0);
    let (m, n) = (batch.body_count(), batch.head_count());
    let mut body = vec![vec![T::zero(); dim]; m];
    let mut head = vec![vec![T::zero(); dim]; n];
    let sel = weights.pairs;
    let two = T::lit(2.0);

    // d/de_a of c * phi(|e_a - e_b|) added to a, subtracted from b.
    fn scatter<T: Scalar>(ga: &mut [T], gb: &mut [T], a: &[T], b: &[T], coef: T) {
        for k in 0..a.len() {
            let g = coef * (a[k] - b[k]);
            ga[k] = ga[k] + g;
            gb[k] = gb[k] - g;
        }
    }
    let push_coef = |a: &[T], b: &[T]| -> T {
        let r = sq_dist(a, b).sqrt();
        if r >= weights.delta || r <= T::zero() {
            T::zero()
        } else {
            -two * (weights.delta - r) / r
        }
    };

    let pull_same = weights.sigma * weights.mu;
    let push_same = weights.tau * weights.mu;
    for (emb, ids, dist, grads, count) in [
        (&batch.body_embeddings, &batch.body_identity, &batch.body_box_distances, &mut body, m),
        (&batch.head_embeddings, &batch.head_identity, &batch.head_box_distances, &mut head, n),
    ] {
        let norm = norm_factor::<T>(count, count);
        for i in 0..count {
            for j in 0..count {
                if i == j {
                    continue;
                }
                let mut coef = T::zero();
                if pulls(sel, ids[i], ids[j]) {
                    coef = coef + pull_same * norm * two * dist[i][j].exp();
                }
                if pushes(sel, ids[i], ids[j]) {
                    coef = coef + push_same * norm * push_coef(&emb[i], &emb[j]);
                }
                if coef != T::zero() {
                    let (gi, gj) = two_mut(grads, i, j);
                    scatter(gi, gj, &emb[i], &emb[j], coef);
                }
            }
        }
    }

    let norm = norm_factor::<T>(m, n);
    for i in 0..m {
        for j in 0..n {
            let (b, h) = (&batch.body_embeddings[i], &batch.head_embeddings[j]);
            let mut coef = T::zero();
            if pulls(sel, batch.body_identity[i], batch.head_identity[j]) {
                coef = coef + weights.sigma * weights.beta * norm * two;
            }
            if pushes(sel, batch.body_identity[i], batch.head_identity[j]) {
                coef = coef + weights.tau * weights.beta * norm * push_coef(b, h);
            }
            if coef != T::zero() {
                scatter(&mut body[i], &mut head[j], b, h, coef);
            }
        }
    }
    Ok(AmlGradient { body, head })
}

fn two_mut<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    debug_assert_ne!(i, j);
    if i < j {
        let (lo, hi) = v.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// Agreement between [`aml_gradient`] and central finite differences of [`aml_loss`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub components: usize,
    pub skipped_near_hinge: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

/// Compares analytic and central-difference gradients. Components of embeddings that
/// take part in a push pair whose distance lies within `hinge_band` of the margin are
/// skipped, since the loss is not twice differentiable there.
pub fn gradient_check<T: Scalar>(
    batch: &LossBatch<T>,
    weights: &LossWeights<T>,
    step: T,
    hinge_band: T,
) -> Result<GradientCheck, AmlError> {
    let analytic = aml_gradient(batch, weights)?;
    let (m, n) = (batch.body_count(), batch.head_count());
    let near = |a: &[T], b: &[T]| (sq_dist(a, b).sqrt() - weights.delta).abs() <= hinge_band;
    let mut body_near = vec![false; m];
    let mut head_near = vec![false; n];
    for i in 0..m {
        for j in 0..m {
            if i != j && near(&batch.body_embeddings[i], &batch.body_embeddings[j]) {
                body_near[i] = true;
            }
        }
        for j in 0..n {
            if near(&batch.body_embeddings[i], &batch.head_embeddings[j]) {
                body_near[i] = true;
                head_near[j] = true;
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && near(&batch.head_embeddings[i], &batch.head_embeddings[j]) {
                head_near[i] = true;
            }
        }
    }

    let mut report = GradientCheck { components: 0, skipped_near_hinge: 0, max_abs_error: 0.0, max_rel_error: 0.0 };
    let mut probe = batch.clone();
    let two = T::lit(2.0);
    for (is_body, count) in [(true, m), (false, n)] {
        for i in 0..count {
            let skip = if is_body { body_near[i] } else { head_near[i] };
            let dim = if is_body { batch.body_embeddings[i].len() } else { batch.head_embeddings[i].len() };
            for k in 0..dim {
                if skip {
                    report.skipped_near_hinge += 1;
                    continue;
                }
                let original = *component_mut(&mut probe, is_body, i, k);
                *component_mut(&mut probe, is_body, i, k) = original + step;
                let plus = aml_loss(&probe, weights)?;
                *component_mut(&mut probe, is_body, i, k) = original - step;
                let minus = aml_loss(&probe, weights)?;
                *component_mut(&mut probe, is_body, i, k) = original;
                let numeric = ((plus - minus) / (two * step)).as_f64();
                let exact = if is_body { analytic.body[i][k] } else { analytic.head[i][k] }.as_f64();
                let abs = (numeric - exact).abs();
                let rel = abs / numeric.abs().max(exact.abs()).max(1e-6);
                report.components += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                report.max_rel_error = report.max_rel_error.max(rel);
            }
        }
    }
    Ok(report)
}

fn component_mut<T>(batch: &mut LossBatch<T>, body: bool, i: usize, k: usize) -> &mut T {
    if body {
        &mut batch.body_embeddings[i][k]
    } else {
        &mut batch.head_embeddings[i][k]
    }
}

/// Random batch for tests and demos: up to `max_parts` bodies and heads, dimension up
/// to `max_dim`, up to four identities, components in `[-1.5, 1.5)` and box distances in
/// `[0, 1)`.
pub fn random_batch(rng: &mut impl Rng, max_parts: usize, max_dim: usize) -> LossBatch<f64> {
    let m = rng.random_range(1..=max_parts);
    let n = rng.random_range(1..=max_parts);
    let d = rng.random_range(1..=max_dim);
    let ids = rng.random_range(1..=4u64);
    let emb = |rng: &mut dyn rand::RngCore| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
    let dist = |rng: &mut dyn rand::RngCore, k: usize| {
        let mut out = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i + 1..k {
                let v = rng.random_range(0.0..1.0);
                out[i][j] = v;
                out[j][i] = v;
            }
        }
        out
    };
    LossBatch {
        body_embeddings: (0..m).map(|_| emb(rng)).collect(),
        head_embeddings: (0..n).map(|_| emb(rng)).collect(),
        body_identity: (0..m).map(|_| rng.random_range(0..ids)).collect(),
        head_identity: (0..n).map(|_| rng.random_range(0..ids)).collect(),
        body_box_distances: dist(rng, m),
        head_box_distances: dist(rng, n),
    }
}
