//! Multiple instance learning over bags of per-second instances.
//!
//! A bag's score for class `n` is the maximum of its instances' scores for
//! that class. The loss is class-weighted binary cross-entropy on those bag
//! scores, and its gradient reaches the network only through the instance
//! that attained each class maximum.

mod adam;
mod stream;
mod train;

use crate::error::{Error, Result};
use crate::nn::{ForwardCache, Gradients, Model};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use stream::{stream_tag, StreamEvent, StreamRecord, StreamTagger};
pub use train::{clip_scores, evaluate_clips, train, EpochRecord, Pooling, TrainConfig, TrainOutcome};

/// Probability clamp used when a loss has to be evaluated from scores alone.
pub const PROB_CLAMP: f64 = 1e-12;

/// An audio clip seen as a bag of instance feature vectors with clip-level
/// (weak) labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub instances: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl Bag {
    pub fn new(id: impl Into<String>, instances: Vec<Vec<f64>>, labels: Vec<bool>) -> Result<Self> {
        let bag = Self {
            id: id.into(),
            instances,
            labels,
        };
        bag.validate()?;
        Ok(bag)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .instances
            .first()
            .ok_or_else(|| Error::EmptyBag(self.id.clone()))?;
        if let Some(bad) = self.instances.iter().find(|x| x.len() != first.len()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values per instance in bag `{}`", first.len(), self.id),
                got: format!("{} values", bad.len()),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Origin {
    stamp: u64,
    bag_id: String,
    n_instances: usize,
}

/// Instance scores `f_n(x_j)`, bag scores `max_j f_n(x_j)` and the
/// instance that attains each maximum (lowest index on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    pub instance_logits: Vec<Vec<f64>>,
    pub instance_scores: Vec<Vec<f64>>,
    pub bag_scores: Vec<f64>,
    pub argmax_idx: Vec<usize>,
    origin: Option<Origin>,
}

impl BagPrediction {
    /// Builds a prediction from raw probabilities (rows = instances). The
    /// logits used by [`mil_loss`] are recovered from the probabilities
    /// clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn from_scores(instance_scores: Vec<Vec<f64>>) -> Result<Self> {
        let logits = instance_scores
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&p| {
                        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                        (p / (1.0 - p)).ln()
                    })
                    .collect()
            })
            .collect();
        Self::assemble(logits, instance_scores, None)
    }

    fn assemble(
        instance_logits: Vec<Vec<f64>>,
        instance_scores: Vec<Vec<f64>>,
        origin: Option<Origin>,
    ) -> Result<Self> {
        let n_classes = instance_scores
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::EmptyBag(String::new()))?;
        if instance_scores.iter().any(|r| r.len() != n_classes) {
            return Err(Error::DimensionMismatch("ragged instance score matrix".into()));
        }
        let mut bag_scores = instance_scores[0].clone();
        let mut argmax_idx = vec![0; n_classes];
        for (j, row) in instance_scores.iter().enumerate().skip(1) {
            for n in 0..n_classes {
                if row[n] > bag_scores[n] {
                    bag_scores[n] = row[n];
                    argmax_idx[n] = j;
                }
            }
        }
        Ok(Self {
            instance_logits,
            instance_scores,
            bag_scores,
            argmax_idx,
            origin,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.bag_scores.len()
    }

    pub fn n_instances(&self) -> usize {
        self.instance_scores.len()
    }

    /// Logit of the maximal instance for every class.
    pub fn bag_logits(&self) -> Vec<f64> {
        self.argmax_idx
            .iter()
            .enumerate()
            .map(|(n, &j)| self.instance_logits[j][n])
            .collect()
    }
}

/// Scores every instance of `bag` and max-pools per class.
pub fn bag_forward(model: &Model, bag: &Bag) -> Result<BagPrediction> {
    Ok(bag_forward_cached(model, bag)?.0)
}

pub(crate) fn bag_forward_cached(
    model: &Model,
    bag: &Bag,
) -> Result<(BagPrediction, Vec<ForwardCache>)> {
    bag.validate()?;
    let mut logits = Vec::with_capacity(bag.len());
    let mut scores = Vec::with_capacity(bag.len());
    let mut caches = Vec::with_capacity(bag.len());
    for f in model.forward_many(&bag.instances)? {
        logits.push(f.logits);
        scores.push(f.scores);
        caches.push(f.cache);
    }
    let origin = Origin {
        stamp: model.stamp(),
        bag_id: bag.id.clone(),
        n_instances: bag.len(),
    };
    let pred = BagPrediction::assemble(logits, scores, Some(origin))?;
    Ok((pred, caches))
}

/// Inverse-frequency class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(n_classes: usize) -> Self {
        Self {
            w: vec![1.0; n_classes],
        }
    }

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidWeights(format!("class weights must be positive and finite: {w:?}")));
        }
        Ok(Self { w })
    }
}

pub const DEFAULT_WEIGHT_CAP: f64 = 50.0;

/// `w_n = min(cap, ΣN / (C · N_n))` from per-class positive counts.
pub fn class_weights(label_counts: &[u64], cap: f64) -> Result<ClassWeights> {
    if let Some(n) = label_counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(n));
    }
    if !(cap > 0.0) {
        return Err(Error::InvalidConfig(format!("weight cap must be positive, got {cap}")));
    }
    let total: u64 = label_counts.iter().sum();
    let c = label_counts.len() as f64;
    let w = label_counts
        .iter()
        .map(|&n| (total as f64 / (c * n as f64)).min(cap))
        .collect();
    Ok(ClassWeights { w })
}

/// Positive-label count per class over a set of bags.
pub fn label_counts(bags: &[Bag], n_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_classes];
    for bag in bags {
        for (c, &y) in counts.iter_mut().zip(&bag.labels) {
            *c += u64::from(y);
        }
    }
    counts
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_dims(pred: &BagPrediction, labels: &[bool], weights: &ClassWeights) -> Result<()> {
    let n = pred.n_classes();
    if labels.len() != n || weights.w.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} classes predicted, {} labels, {} weights",
            labels.len(),
            weights.w.len()
        )));
    }
    Ok(())
}

/// Weighted cross-entropy of the bag scores summed over classes, evaluated
/// in logit form: `w_n · (softplus(z_n) − y_n · z_n)`.
pub fn mil_loss(pred: &BagPrediction, labels: &[bool], weights: &ClassWeights) -> Result<f64> {
    check_dims(pred, labels, weights)?;
    Ok(pred
        .bag_logits()
        .iter()
        .zip(labels)
        .zip(&weights.w)
        .map(|((&z, &y), &w)| w * (softplus(z) - if y { z } else { 0.0 }))
        .sum())
}

/// Per-instance logit gradients of [`mil_loss`]: class `n` contributes
/// `w_n · (σ(z) − y_n)` to its argmax instance only. Returned in ascending
/// instance order.
pub fn routed_logit_grads(
    pred: &BagPrediction,
    labels: &[bool],
    weights: &ClassWeights,
) -> Result<Vec<(usize, Vec<f64>)>> {
    check_dims(pred, labels, weights)?;
    let n_classes = pred.n_classes();
    let mut routed: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut order: Vec<usize> = pred.argmax_idx.clone();
    order.sort_unstable();
    order.dedup();
    for j in order {
        let mut g = vec![0.0; n_classes];
        for n in (0..n_classes).filter(|&n| pred.argmax_idx[n] == j) {
            let z = pred.instance_logits[j][n];
            g[n] = weights.w[n] * (sigmoid_unclamped(z) - f64::from(u8::from(labels[n])));
        }
        routed.push((j, g));
    }
    Ok(routed)
}

fn sigmoid_unclamped(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gradient of [`mil_loss`] with respect to every model parameter, routed
/// through each class's maximal instance only.
pub fn mil_backward(
    model: &Model,
    bag: &Bag,
    pred: &BagPrediction,
    labels: &[bool],
    weights: &ClassWeights,
) -> Result<Gradients> {
    match &pred.origin {
        Some(o) if o.stamp == model.stamp() && o.bag_id == bag.id && o.n_instances == bag.len() => {}
        _ => return Err(Error::StalePrediction),
    }
    let mut grads = Gradients::zeros_like(model);
    for (j, g) in routed_logit_grads(pred, labels, weights)? {
        let f = model.forward(&bag.instances[j])?;
        model.backward_into(&f.cache, &g, &mut grads, false)?;
    }
    Ok(grads)
}

/// Multi-hot helper for tests and adapters.
pub fn multi_hot(n_classes: usize, positives: &[usize]) -> Vec<bool> {
    let mut v = vec![false; n_classes];
    for &p in positives {
        v[p] = true;
    }
    v
}

/// Decision rule shared by every consumer: a score at the threshold counts
/// as positive.
pub fn decide(score: f64, threshold: f64) -> bool {
    score >= threshold
}
