use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::{
    bag_forward_cached, class_weights, decide, label_counts, mil_loss, routed_logit_grads, Bag,
    ClassWeights, DEFAULT_WEIGHT_CAP,
};
use crate::error::{Error, Result};
use crate::evalfuse::{micro_prf, Prf, TagResult};
use crate::nn::{sigmoid, ForwardCache, Gradients, Model};

/// How instance scores are pooled into a clip score for validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::InvalidConfig(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub selection_pooling: Pooling,
    pub threshold: f64,
    /// Inverse-frequency class weighting; `false` uses unit weights.
    pub class_weighting: bool,
    pub weight_cap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            selection_pooling: Pooling::Mean,
            threshold: 0.5,
            class_weighting: true,
            weight_cap: DEFAULT_WEIGHT_CAP,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub selected: bool,
    pub pooling: Pooling,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
}

impl TrainOutcome {
    /// Writes the log as JSON Lines.
    pub fn write_log<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.log {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Clip-level scores: instance scores pooled per class.
pub fn clip_scores(model: &Model, bag: &Bag, pooling: Pooling) -> Result<Vec<f64>> {
    let logits = model.logits_many(&bag.instances)?;
    let mut rows = logits.into_iter().map(|z| z.into_iter().map(sigmoid).collect::<Vec<f64>>());
    let mut acc = rows.next().ok_or_else(|| Error::EmptyBag(bag.id.clone()))?;
    for row in rows {
        for (a, s) in acc.iter_mut().zip(row) {
            match pooling {
                Pooling::Max => {
                    if s > *a {
                        *a = s
                    }
                }
                Pooling::Mean => *a += s,
            }
        }
    }
    if pooling == Pooling::Mean {
        let n = bag.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(acc)
}

/// Micro precision/recall/F1 of pooled clip decisions against bag labels.
pub fn evaluate_clips(model: &Model, bags: &[Bag], pooling: Pooling, threshold: f64) -> Result<Prf> {
    let results = bags
        .iter()
        .map(|bag| {
            let scores = clip_scores(model, bag, pooling)?;
            Ok(TagResult {
                id: bag.id.clone(),
                predicted: scores.iter().map(|&s| decide(s, threshold)).collect(),
                reference: bag.labels.clone(),
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    micro_prf(&results)
}

fn check_split(name: &str, bags: &[Bag], model: &Model) -> Result<()> {
    if bags.is_empty() {
        return Err(Error::EmptyDataset(format!("{name} split has no bags")));
    }
    for bag in bags {
        if bag.labels.len() != model.n_classes() {
            return Err(Error::DimensionMismatch(format!(
                "bag `{}` has {} labels, model has {} classes",
                bag.id,
                bag.labels.len(),
                model.n_classes()
            )));
        }
        if let Some(x) = bag.instances.iter().find(|x| x.len() != model.input_len()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input values", model.input_len()),
                got: format!("{} in bag `{}`", x.len(), bag.id),
            });
        }
    }
    Ok(())
}

/// Trains with routed MIL gradients and Adam over shuffled mini-batches of
/// bags, validating after every epoch and keeping the checkpoint with the
/// best clip-level micro-F1 (earliest epoch on ties).
pub fn train(mut model: Model, train: &[Bag], val: &[Bag], cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_split("training", train, &model)?;
    check_split("validation", val, &model)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let weights = if cfg.class_weighting {
        class_weights(&label_counts(train, model.n_classes()), cfg.weight_cap)?
    } else {
        ClassWeights::uniform(model.n_classes())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_model(
        &model,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut acc = Gradients::zeros_like(&model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            acc.fill_zero();
            let mut routed: Vec<(ForwardCache, Vec<f64>)> = Vec::new();
            for &b in batch {
                let bag = &train[b];
                let (pred, caches) = bag_forward_cached(&model, bag)?;
                let loss = mil_loss(&pred, &bag.labels, &weights)?;
                if !loss.is_finite() {
                    return Err(Error::DivergedLoss {
                        epoch,
                        bag: bag.id.clone(),
                    });
                }
                loss_sum += loss;
                let mut caches: Vec<Option<ForwardCache>> = caches.into_iter().map(Some).collect();
                for (j, g) in routed_logit_grads(&pred, &bag.labels, &weights)? {
                    let cache = caches[j].take().expect("each instance is routed once");
                    routed.push((cache, g));
                }
            }
            let items: Vec<(&ForwardCache, &[f64])> = routed.iter().map(|(c, g)| (c, g.as_slice())).collect();
            model.backward_many(&items, &mut acc)?;
            acc.scale(1.0 / batch.len() as f64);
            adam_step(&mut model, &acc, &mut adam)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_metric = evaluate_clips(&model, val, cfg.selection_pooling, cfg.threshold)?.f1;
        if best.as_ref().is_none_or(|(_, v, _)| val_metric > *v) {
            best = Some((epoch, val_metric, model.clone()));
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            selected: false,
            pooling: cfg.selection_pooling,
        });
    }

    Ok(match best {
        Some((epoch, val, best_model)) => {
            log[epoch - 1].selected = true;
            TrainOutcome {
                model: best_model,
                log,
                best_epoch: Some(epoch),
                best_val: Some(val),
            }
        }
        None => TrainOutcome {
            model,
            log,
            best_epoch: None,
            best_val: None,
        },
    })
}
