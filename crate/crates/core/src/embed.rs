//! Embedding network: trained frame-wise on clip labels, then truncated to
//! its penultimate layer to turn each 1 s instance into a vector.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::{train, Bag, Pooling, TrainConfig, TrainOutcome};
use crate::nn::{output_shape, LayerSpec, Model, Standardizer};

pub const DEFAULT_EMBED_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModelConfig {
    pub input_shape: Vec<usize>,
    /// Layers before the embedding layer; must end in a flat vector.
    pub backbone: Vec<LayerSpec>,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub standardize: bool,
}

impl EmbeddingModelConfig {
    /// Dense backbone over a flattened instance.
    pub fn dense(input_shape: &[usize], hidden: &[usize], embed_dim: usize, n_classes: usize) -> Self {
        let mut backbone = Vec::new();
        let mut prev = input_shape.iter().product();
        if input_shape.len() > 1 {
            backbone.push(LayerSpec::Flatten);
        }
        for &h in hidden {
            backbone.push(LayerSpec::dense(prev, h));
            backbone.push(LayerSpec::Relu);
            prev = h;
        }
        Self {
            input_shape: input_shape.to_vec(),
            backbone,
            embed_dim,
            n_classes,
            seed: 0,
            standardize: true,
        }
    }

    /// Backbone, then dense → `embed_dim` with ReLU, then the class head.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        let shape = output_shape(&self.input_shape, &self.backbone)?;
        let mut specs = self.backbone.clone();
        let prev = match shape.as_slice() {
            [n] => *n,
            _ => {
                specs.push(LayerSpec::Flatten);
                shape.iter().product()
            }
        };
        specs.push(LayerSpec::dense(prev, self.embed_dim));
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::dense(self.embed_dim, self.n_classes));
        Ok(specs)
    }

    /// Builds the network, fitting the input standardizer on every
    /// training instance when enabled.
    pub fn build(&self, train: &[Bag]) -> Result<Model> {
        let mut model = Model::build(&self.input_shape, &self.layer_specs()?, self.seed)?;
        if self.standardize {
            let rows = train.iter().flat_map(|b| b.instances.iter().map(Vec::as_slice));
            model.set_standardizer(Some(Standardizer::fit(rows)?))?;
        }
        Ok(model)
    }
}

/// Splits every clip into single-instance bags `"{clip}#{j}"` that inherit
/// the clip labels.
pub fn frame_bags(bags: &[Bag]) -> Vec<Bag> {
    bags.iter()
        .flat_map(|bag| {
            bag.instances.iter().enumerate().map(move |(j, x)| Bag {
                id: format!("{}#{j}", bag.id),
                instances: vec![x.clone()],
                labels: bag.labels.clone(),
            })
        })
        .collect()
}

/// Trains frame-wise on weak labels. Validation runs on whole clips with
/// max pooling of the frame predictions.
pub fn train_embedding_model(
    train_bags: &[Bag],
    val_bags: &[Bag],
    cfg: &EmbeddingModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = cfg.build(train_bags)?;
    let train_cfg = TrainConfig {
        selection_pooling: Pooling::Max,
        ..train_cfg.clone()
    };
    train(model, &frame_bags(train_bags), val_bags, &train_cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Trained,
    External,
}

/// Per-clip instance vectors, all of length `dim`, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub entries: IndexMap<String, Vec<Vec<f32>>>,
    pub source: EmbeddingSource,
}

impl EmbeddingSet {
    pub fn new(dim: usize, source: EmbeddingSource) -> Self {
        Self {
            dim,
            entries: IndexMap::new(),
            source,
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, vectors: Vec<Vec<f32>>) -> Result<()> {
        let id = id.into();
        if let Some(bad) = vectors.iter().find(|v| v.len() != self.dim) {
            return Err(Error::DimMismatch {
                clip: id,
                expected: self.dim,
                got: bad.len(),
            });
        }
        if self.entries.contains_key(&id) {
            return Err(Error::DuplicateClip(id));
        }
        self.entries.insert(id, vectors);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Builds bags in `ids` order with the given label vectors. Every id
    /// must be present; all absent ids are reported together.
    pub fn bags<'a, I>(&self, clips: I) -> Result<Vec<Bag>>
    where
        I: IntoIterator<Item = (&'a str, Vec<bool>)>,
    {
        let mut missing = Vec::new();
        let mut bags = Vec::new();
        for (id, labels) in clips {
            match self.entries.get(id) {
                Some(rows) => {
                    let instances = rows
                        .iter()
                        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
                        .collect();
                    bags.push(Bag::new(id, instances, labels)?);
                }
                None => missing.push(id.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingClip(missing));
        }
        Ok(bags)
    }
}

/// Rounds through `f32`, the precision embeddings are stored at.
pub fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x as f32)).collect()
}

/// Penultimate activations of every instance of every bag.
pub fn extract_embeddings(model: &Model, bags: &[Bag]) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::new(model.penultimate_dim(), EmbeddingSource::Trained);
    for bag in bags {
        let rows = bag
            .instances
            .iter()
            .map(|x| Ok(model.penultimate(x)?.iter().map(|&v| v as f32).collect()))
            .collect::<Result<Vec<Vec<f32>>>>()?;
        set.insert(bag.id.clone(), rows)?;
    }
    Ok(set)
}
