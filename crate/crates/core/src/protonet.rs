//! Prototype computation, distance-softmax classification and the episode
//! cross-entropy loss with its analytic gradient w.r.t. embeddings.
//!
//! Classes are addressed by index into the caller's ordered class set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to probabilities before taking the log in the loss.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    SquaredEuclidean,
    Euclidean,
    Cosine,
}

impl DistanceMetric {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::SquaredEuclidean => "squared_euclidean",
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Cosine => "cosine",
        }
    }
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

pub fn distance<T: Scalar>(a: &[T], b: &[T], metric: DistanceMetric) -> Result<T> {
    check_dims(a.len(), b.len())?;
    match metric {
        DistanceMetric::SquaredEuclidean => Ok(squared_euclidean(a, b)),
        DistanceMetric::Euclidean => Ok(squared_euclidean(a, b).sqrt()),
        DistanceMetric::Cosine => {
            let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
            let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
            if na == T::zero() || nb == T::zero() {
                return Err(Error::ZeroVector);
            }
            // Rounding can push the cosine marginally past 1.
            Ok((T::one() - dot / (na * nb)).max(T::zero()))
        }
    }
}

fn squared_euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + (x - y) * (x - y);
    }
    acc
}

/// One mean embedding per class, in class-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    pub prototypes: Vec<Vec<T>>,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }
}

/// Averages the embedded support vectors of each of `n_classes` classes.
pub fn compute_prototypes<T: Scalar, V: AsRef<[T]>>(
    classes: &[usize],
    embeddings: &[V],
    n_classes: usize,
) -> Result<PrototypeSet<T>> {
    check_dims(classes.len(), embeddings.len())?;
    let dim = embeddings.first().map_or(0, |e| e.as_ref().len());
    let mut sums = vec![vec![T::zero(); dim]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (&c, e) in classes.iter().zip(embeddings) {
        let e = e.as_ref();
        check_dims(dim, e.len())?;
        if c >= n_classes {
            return Err(Error::InvalidSpec(format!(
                "class index {c} outside class set of size {n_classes}"
            )));
        }
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(e) {
            *s = *s + v;
        }
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(k));
    }
    let prototypes = sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| {
            let n = T::from_usize_lossy(n);
            s.into_iter().map(|v| v / n).collect()
        })
        .collect();
    Ok(PrototypeSet { prototypes })
}

/// Per-class probabilities over the class set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior<T> {
    pub probabilities: Vec<T>,
}

impl<T: Scalar> ClassPosterior<T> {
    pub fn prob(&self, class: usize) -> T {
        self.probabilities[class]
    }

    /// Index of the largest probability; ties resolve to the earlier class.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = k;
            }
        }
        best
    }
}

/// Softmax of negated distances, stabilized by subtracting the minimum distance.
pub fn softmax_neg<T: Scalar>(distances: &[T]) -> Vec<T> {
    let min = distances
        .iter()
        .copied()
        .fold(T::infinity(), |a, b| a.min(b));
    let exps: Vec<T> = distances.iter().map(|&d| (min - d).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Classifies one embedded query. The predicted class is the nearest prototype,
/// ties going to the earlier class.
pub fn classify_query<T: Scalar>(
    query: &[T],
    protos: &PrototypeSet<T>,
    metric: DistanceMetric,
) -> Result<(ClassPosterior<T>, usize)> {
    let distances = protos
        .prototypes
        .iter()
        .map(|p| distance(query, p, metric))
        .collect::<Result<Vec<T>>>()?;
    let mut predicted = 0;
    for (k, &d) in distances.iter().enumerate() {
        if d < distances[predicted] {
            predicted = k;
        }
    }
    Ok((
        ClassPosterior {
            probabilities: softmax_neg(&distances),
        },
        predicted,
    ))
}

fn clamped_nll<T: Scalar>(p: T) -> T {
    -(p.max(T::lit(LOG_CLAMP)).ln())
}

/// Mean negative log-probability of the true classes.
pub fn episode_loss<T: Scalar>(
    posteriors: &[ClassPosterior<T>],
    true_classes: &[usize],
) -> Result<T> {
    check_dims(posteriors.len(), true_classes.len())?;
    if posteriors.is_empty() {
        return Err(Error::InvalidSpec(
            "episode loss needs at least one query".into(),
        ));
    }
    let total: T = posteriors
        .iter()
        .zip(true_classes)
        .map(|(p, &y)| clamped_nll(p.prob(y)))
        .sum();
    Ok(total / T::from_usize_lossy(posteriors.len()))
}

/// Embedded episode: support and query embeddings with their class indices.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedEpisode<'a, T> {
    pub support: &'a [Vec<T>],
    pub support_classes: &'a [usize],
    pub query: &'a [Vec<T>],
    pub query_classes: &'a [usize],
    pub n_classes: usize,
}

/// Loss and its gradient w.r.t. every support and query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeGradient<T> {
    pub loss: T,
    pub support: Vec<Vec<T>>,
    pub query: Vec<Vec<T>>,
}

/// Exact gradient of the squared-Euclidean episode loss.
///
/// With `d_k = ‖z − c_k‖²` and `p = softmax(−d)`, each query contributes
/// `(δ_ky − p_k)·2(z − c_k)/|Q|` to its own gradient and the negation of that
/// to prototype `k`, which is shared equally among the class's support vectors.
/// Queries whose true-class probability sits below the log clamp contribute
/// nothing, matching the flat clamped loss.
pub fn episode_loss_gradient<T: Scalar>(
    episode: &EmbeddedEpisode<'_, T>,
    metric: DistanceMetric,
) -> Result<EpisodeGradient<T>> {
    if metric != DistanceMetric::SquaredEuclidean {
        return Err(Error::UnsupportedMetric(metric.name()));
    }
    check_dims(episode.query.len(), episode.query_classes.len())?;
    let protos = compute_prototypes(episode.support_classes, episode.support, episode.n_classes)?;
    let dim = protos.dimension();
    let nq = T::from_usize_lossy(episode.query.len());
    let two = T::lit(2.0);
    let clamp = T::lit(LOG_CLAMP);

    let mut proto_grads = vec![vec![T::zero(); dim]; episode.n_classes];
    let mut query_grads = Vec::with_capacity(episode.query.len());
    let mut posteriors = Vec::with_capacity(episode.query.len());
    for (z, &y) in episode.query.iter().zip(episode.query_classes) {
        check_dims(dim, z.len())?;
        let (post, _) = classify_query(z, &protos, metric)?;
        let mut gz = vec![T::zero(); dim];
        if post.prob(y) >= clamp {
            for (k, c) in protos.prototypes.iter().enumerate() {
                let indicator = if k == y { T::one() } else { T::zero() };
                let coef = two * (indicator - post.prob(k)) / nq;
                for ((g, gc), (&zi, &ci)) in
                    gz.iter_mut().zip(&mut proto_grads[k]).zip(z.iter().zip(c))
                {
                    let term = coef * (zi - ci);
                    *g = *g + term;
                    *gc = *gc - term;
                }
            }
        }
        query_grads.push(gz);
        posteriors.push(post);
    }
    let loss = episode_loss(&posteriors, episode.query_classes)?;

    let mut counts = vec![0usize; episode.n_classes];
    for &c in episode.support_classes {
        counts[c] += 1;
    }
    let support = episode
        .support_classes
        .iter()
        .map(|&c| {
            let n = T::from_usize_lossy(counts[c]);
            proto_grads[c].iter().map(|&g| g / n).collect()
        })
        .collect();
    Ok(EpisodeGradient {
        loss,
        support,
        query: query_grads,
    })
}
