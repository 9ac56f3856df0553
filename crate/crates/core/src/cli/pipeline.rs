//! Audio → instance vectors → scores, shared by batch tagging and
//! streaming so both paths compute identical numbers.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use super::modelfile::{FrontEnd, ModelFile};
use crate::embed::round_f32;
use crate::error::{Error, Result};
use crate::features::{i16_to_unit, load_wav, AudioClip};
use crate::features::{segment_clip, FeatureConfig, FeatureExtractor};
use crate::mil::{bag_forward, decide, Bag, StreamTagger};
use crate::nn::Model;

/// Maps `f` over `items` on all cores, keeping input order. The first
/// error in input order wins.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Vec<Result<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    parts.into_iter().flatten().collect()
}

/// Loads every clip of a manifest; clip ids come from the manifest.
pub fn load_clips(manifest: &Manifest) -> Result<Vec<AudioClip>> {
    par_map(&manifest.records, |rec| {
        let mut clip = load_wav(manifest.resolve(rec))?;
        clip.id = rec.id.clone();
        Ok(clip)
    })
}

/// Turns one segment of audio into the vector a tagging model consumes:
/// log-mel features, optionally passed through an embedding network.
/// Values are rounded to `f32`, the precision of stored feature files.
#[derive(Clone)]
pub struct FrontEndRuntime {
    extractor: FeatureExtractor,
    embed: Option<Model>,
}

impl FrontEndRuntime {
    pub fn log_mel(cfg: FeatureConfig) -> Result<Self> {
        Ok(Self {
            extractor: FeatureExtractor::new(cfg)?,
            embed: None,
        })
    }

    /// Front end of an embedding model file.
    pub fn embedding(embed: &ModelFile) -> Result<Self> {
        match &embed.front_end {
            FrontEnd::LogMel(cfg) => {
                if cfg.instance_len() != embed.model.input_len() {
                    return Err(Error::MalformedModel(format!(
                        "feature config yields {} values, model expects {}",
                        cfg.instance_len(),
                        embed.model.input_len()
                    )));
                }
                embed.model.penultimate(&vec![0.0; embed.model.input_len()])?;
                Ok(Self {
                    extractor: FeatureExtractor::new(cfg.clone())?,
                    embed: Some(embed.model.clone()),
                })
            }
            other => Err(Error::InvalidConfig(format!(
                "embedding model must read log-mel features, found {other:?}"
            ))),
        }
    }

    pub fn config(&self) -> &FeatureConfig {
        self.extractor.config()
    }

    pub fn dim(&self) -> usize {
        match &self.embed {
            Some(m) => m.penultimate_dim(),
            None => self.config().instance_len(),
        }
    }

    pub fn vector(&self, segment: &[f64]) -> Result<Vec<f64>> {
        let x = round_f32(&self.extractor.extract_segment(segment)?.into_vec());
        match &self.embed {
            Some(m) => Ok(round_f32(&m.penultimate(&x)?)),
            None => Ok(x),
        }
    }

    pub fn clip_vectors(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        segment_clip(clip, self.config())?
            .iter()
            .map(|s| self.vector(s))
            .collect()
    }

    /// Labelled bags for every manifest clip.
    pub fn manifest_bags(&self, manifest: &Manifest) -> Result<Vec<Bag>> {
        if manifest.is_empty() {
            return Err(Error::EmptyDataset("manifest has no clips".into()));
        }
        let clips = load_clips(manifest)?;
        let vectors = par_map(&clips, |c| self.clip_vectors(c))?;
        manifest
            .records
            .iter()
            .zip(vectors)
            .map(|(rec, v)| Bag::new(rec.id.clone(), v, manifest.label_vector(rec)))
            .collect()
    }
}

/// One line of `tag` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipTag {
    pub id: String,
    pub scores: Vec<f64>,
    pub decisions: Vec<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instance_scores: Vec<Vec<f64>>,
}

pub fn read_tags(path: &std::path::Path) -> Result<Vec<ClipTag>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                line: i + 1,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    out.flush().map_err(|e| Error::io("<output>", e))
}

/// A tagging model with its front end and thresholds.
pub struct Tagger {
    pub model: ModelFile,
    front: Option<FrontEndRuntime>,
    thresholds: Vec<f64>,
}

impl Tagger {
    /// `thresholds` holds one value per class or a single shared value.
    pub fn new(model: ModelFile, embed: Option<&ModelFile>, thresholds: Option<&[f64]>) -> Result<Self> {
        let n = model.model.n_classes();
        let thresholds = match thresholds {
            None => vec![0.5; n],
            Some([t]) => vec![*t; n],
            Some(ts) if ts.len() == n => ts.to_vec(),
            Some(ts) => {
                return Err(Error::InvalidConfig(format!(
                    "{} thresholds for a {n}-class model",
                    ts.len()
                )))
            }
        };
        let front = match (&model.front_end, embed) {
            (FrontEnd::LogMel(cfg), None) => Some(FrontEndRuntime::log_mel(cfg.clone())?),
            (FrontEnd::LogMel(_), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "model reads log-mel features directly; drop the embedding model".into(),
                ))
            }
            (FrontEnd::Embedding { .. }, None) => {
                return Err(Error::InvalidConfig(
                    "model reads embeddings; pass the embedding model as well".into(),
                ))
            }
            (FrontEnd::Embedding { .. }, Some(e)) => Some(FrontEndRuntime::embedding(e)?),
            (FrontEnd::External { .. }, None) => None,
            (FrontEnd::External { .. }, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "model reads external vectors; no embedding model applies".into(),
                ))
            }
        };
        if let Some(f) = &front {
            if f.dim() != model.model.input_len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} input values", model.model.input_len()),
                    got: format!("{} from the front end", f.dim()),
                });
            }
        }
        Ok(Self {
            model,
            front,
            thresholds,
        })
    }

    fn front(&self) -> Result<&FrontEndRuntime> {
        self.front.as_ref().ok_or_else(|| {
            Error::InvalidConfig("model reads external vectors and cannot tag audio".into())
        })
    }

    pub fn tag_vectors(&self, id: &str, vectors: Vec<Vec<f64>>) -> Result<ClipTag> {
        let bag = Bag::new(id, vectors, vec![false; self.model.model.n_classes()])?;
        let pred = bag_forward(&self.model.model, &bag)?;
        Ok(ClipTag {
            id: id.to_string(),
            decisions: pred
                .bag_scores
                .iter()
                .zip(&self.thresholds)
                .map(|(&s, &t)| decide(s, t))
                .collect(),
            scores: pred.bag_scores,
            instance_scores: pred.instance_scores,
        })
    }

    pub fn tag_clip(&self, clip: &AudioClip) -> Result<ClipTag> {
        self.tag_vectors(&clip.id, self.front()?.clip_vectors(clip)?)
    }

    /// Reads 16-bit little-endian mono PCM and writes one JSON record per
    /// second as soon as it is complete. A final partial second of at least
    /// half a segment is zero-padded. Returns the number of records.
    pub fn stream<R: Read, W: Write>(&self, mut input: R, mut out: W) -> Result<usize> {
        let front = self.front()?;
        let seg = front.config().segment_len();
        let mut tagger = StreamTagger::new(&self.model.model, Some(self.thresholds.clone()))?;
        let mut bytes = vec![0u8; 2 * seg];
        let mut emitted = 0;
        loop {
            let filled = fill(&mut input, &mut bytes)?;
            let n = filled / 2;
            if n == 0 || (n < seg && 2 * n < seg) {
                break;
            }
            let mut samples: Vec<f64> = bytes[..2 * n]
                .chunks_exact(2)
                .map(|b| i16_to_unit(i16::from_le_bytes([b[0], b[1]])))
                .collect();
            samples.resize(seg, 0.0);
            let event = tagger.push(&front.vector(&samples)?);
            serde_json::to_writer(&mut out, &event)?;
            out.write_all(b"\n").map_err(|e| Error::io("<stdout>", e))?;
            out.flush().map_err(|e| Error::io("<stdout>", e))?;
            emitted += 1;
            if n < seg {
                break;
            }
        }
        Ok(emitted)
    }
}

/// Reads until `buf` is full or the input ends; returns bytes read.
fn fill<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("<stdin>", e)),
        }
    }
    Ok(filled)
}
