use serde::{Deserialize, Serialize};

use super::decide;
use crate::error::{Error, Result};
use crate::nn::Model;

/// Scores and thresholded decisions for one instance of a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub index: usize,
    pub scores: Vec<f64>,
    pub decisions: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StreamEvent {
    Record(StreamRecord),
    Error { index: usize, error: String },
}

impl StreamEvent {
    pub fn record(&self) -> Option<&StreamRecord> {
        match self {
            StreamEvent::Record(r) => Some(r),
            StreamEvent::Error { .. } => None,
        }
    }
}

/// Scores instances one at a time as they arrive. A malformed instance
/// yields an error event and the stream continues.
#[derive(Debug, Clone)]
pub struct StreamTagger<'m> {
    model: &'m Model,
    thresholds: Vec<f64>,
    next: usize,
}

impl<'m> StreamTagger<'m> {
    /// `thresholds` defaults to 0.5 for every class.
    pub fn new(model: &'m Model, thresholds: Option<Vec<f64>>) -> Result<Self> {
        let thresholds = thresholds.unwrap_or_else(|| vec![0.5; model.n_classes()]);
        if thresholds.len() != model.n_classes() {
            return Err(Error::DimensionMismatch(format!(
                "{} thresholds for {} classes",
                thresholds.len(),
                model.n_classes()
            )));
        }
        Ok(Self {
            model,
            thresholds,
            next: 0,
        })
    }

    pub fn push(&mut self, instance: &[f64]) -> StreamEvent {
        let index = self.next;
        self.next += 1;
        match self.model.predict(instance) {
            Ok(scores) => {
                let decisions = scores
                    .iter()
                    .zip(&self.thresholds)
                    .map(|(&s, &t)| decide(s, t))
                    .collect();
                StreamEvent::Record(StreamRecord {
                    index,
                    scores,
                    decisions,
                })
            }
            Err(e) => StreamEvent::Error {
                index,
                error: e.to_string(),
            },
        }
    }

    /// Number of instances seen so far.
    pub fn position(&self) -> usize {
        self.next
    }
}

/// Lazily tags every instance of `source`, emitting one event per instance
/// in arrival order.
pub fn stream_tag<'m, I, X>(
    model: &'m Model,
    source: I,
    thresholds: Option<Vec<f64>>,
) -> Result<impl Iterator<Item = StreamEvent> + 'm>
where
    I: IntoIterator<Item = X>,
    I::IntoIter: 'm,
    X: AsRef<[f64]>,
{
    let mut tagger = StreamTagger::new(model, thresholds)?;
    Ok(source.into_iter().map(move |x| tagger.push(x.as_ref())))
}
