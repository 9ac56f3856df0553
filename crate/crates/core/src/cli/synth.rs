//! Deterministic synthetic corpora of tone bursts in noise.
//!
//! Each class owns a base frequency; a clip positive for a class contains
//! one to three bursts of that tone (detuned slightly, 0.5–1.5 s long, at
//! random offsets) over Gaussian background noise.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::features::{i16_to_unit, unit_to_i16, write_wav16, AudioClip, SAMPLE_RATE};

pub const MAX_CLASSES: usize = 5;
pub const BASE_FREQS: [f64; MAX_CLASSES] = [500.0, 900.0, 1500.0, 2400.0, 3600.0];
const FADE_S: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// Background noise standard deviation in dB relative to full scale.
    pub noise_db: f64,
    /// Relative frequency of each class as a clip's primary label; empty
    /// means uniform.
    pub class_balance: Vec<f64>,
    /// Fraction of clips with no event at all.
    pub empty_fraction: f64,
    /// Probability that a labelled clip also carries a second class.
    pub extra_label_prob: f64,
    pub clip_seconds: f64,
    /// Peak amplitude range of a burst.
    pub min_amplitude: f64,
    pub max_amplitude: f64,
    /// Relative detuning range around the class frequency.
    pub detune: f64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_clips: 100,
            n_classes: 3,
            seed: 0,
            noise_db: -30.0,
            class_balance: Vec::new(),
            empty_fraction: 0.1,
            extra_label_prob: 0.2,
            clip_seconds: 10.0,
            min_amplitude: 0.05,
            max_amplitude: 0.3,
            detune: 0.05,
            id_prefix: "clip".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_clips < 4 {
            return bad(format!("n_clips must be at least 4, got {}", self.n_clips));
        }
        if self.n_classes == 0 || self.n_classes > MAX_CLASSES {
            return bad(format!("n_classes must be 1..={MAX_CLASSES}, got {}", self.n_classes));
        }
        if !self.class_balance.is_empty()
            && (self.class_balance.len() != self.n_classes
                || self.class_balance.iter().any(|&w| !(w > 0.0 && w.is_finite())))
        {
            return bad(format!(
                "class_balance needs {} positive weights, got {:?}",
                self.n_classes, self.class_balance
            ));
        }
        if !(0.0..1.0).contains(&self.empty_fraction) {
            return bad(format!("empty_fraction must be in [0, 1), got {}", self.empty_fraction));
        }
        if !(0.0..=1.0).contains(&self.extra_label_prob) {
            return bad(format!("extra_label_prob must be in [0, 1], got {}", self.extra_label_prob));
        }
        if !(self.clip_seconds >= 2.0 && self.clip_seconds <= 600.0) {
            return bad(format!("clip_seconds must be in [2, 600], got {}", self.clip_seconds));
        }
        if !(self.min_amplitude > 0.0 && self.min_amplitude <= self.max_amplitude && self.max_amplitude <= 1.0) {
            return bad("amplitude range must satisfy 0 < min <= max <= 1".into());
        }
        if !(0.0..0.5).contains(&self.detune) {
            return bad(format!("detune must be in [0, 0.5), got {}", self.detune));
        }
        if !self.noise_db.is_finite() || self.noise_db > 0.0 {
            return bad(format!("noise_db must be finite and <= 0, got {}", self.noise_db));
        }
        Ok(())
    }

    pub fn class_list(&self) -> Vec<String> {
        BASE_FREQS[..self.n_classes]
            .iter()
            .map(|f| format!("tone_{f}hz"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEvent {
    pub class: String,
    pub onset_s: f64,
    pub duration_s: f64,
    pub freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub id: String,
    /// Already quantized to 16-bit levels, identical to the written WAV.
    pub samples: Vec<f64>,
    pub labels: Vec<bool>,
    pub events: Vec<SynthEvent>,
}

impl SynthClip {
    pub fn audio(&self) -> AudioClip {
        AudioClip {
            id: self.id.clone(),
            samples: self.samples.clone(),
            sample_rate: SAMPLE_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub class_list: Vec<String>,
    pub clips: Vec<SynthClip>,
}

/// Splits `total` into integer quotas proportional to `weights`
/// (largest remainder, ties to the lower index).
fn quotas(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - q.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        q[i] += 1;
    }
    q
}

pub fn synthesize(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_empty = (cfg.n_clips as f64 * cfg.empty_fraction).round() as usize;
    let balance = if cfg.class_balance.is_empty() {
        vec![1.0; cfg.n_classes]
    } else {
        cfg.class_balance.clone()
    };
    let mut primaries: Vec<Option<usize>> = quotas(cfg.n_clips - n_empty, &balance)
        .into_iter()
        .enumerate()
        .flat_map(|(c, q)| std::iter::repeat_n(Some(c), q))
        .collect();
    primaries.extend(std::iter::repeat_n(None, n_empty));
    primaries.shuffle(&mut rng);

    let class_list = cfg.class_list();
    let n_samples = (cfg.clip_seconds * f64::from(SAMPLE_RATE)).round() as usize;
    let noise = Normal::new(0.0, 10f64.powf(cfg.noise_db / 20.0)).expect("finite noise level");
    let sr = f64::from(SAMPLE_RATE);

    let clips = primaries
        .into_iter()
        .enumerate()
        .map(|(i, primary)| {
            let mut labels = vec![false; cfg.n_classes];
            if let Some(c) = primary {
                labels[c] = true;
                if cfg.n_classes > 1 && rng.gen_bool(cfg.extra_label_prob) {
                    let mut other = rng.gen_range(0..cfg.n_classes - 1);
                    if other >= c {
                        other += 1;
                    }
                    labels[other] = true;
                }
            }
            let mut samples: Vec<f64> = (0..n_samples).map(|_| noise.sample(&mut rng)).collect();
            let mut events = Vec::new();
            for c in (0..cfg.n_classes).filter(|&c| labels[c]) {
                for _ in 0..rng.gen_range(1..=3) {
                    let duration_s = rng.gen_range(0.5..=1.5);
                    let onset_s = rng.gen_range(0.0..=cfg.clip_seconds - duration_s);
                    let freq_hz = BASE_FREQS[c] * (1.0 + rng.gen_range(-cfg.detune..=cfg.detune));
                    let amplitude = rng.gen_range(cfg.min_amplitude..=cfg.max_amplitude);
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    let start = (onset_s * sr).round() as usize;
                    let len = (duration_s * sr).round() as usize;
                    let fade = (FADE_S * sr) as usize;
                    for k in 0..len.min(n_samples - start) {
                        let ramp = if k < fade {
                            k as f64 / fade as f64
                        } else if len - k <= fade {
                            (len - k) as f64 / fade as f64
                        } else {
                            1.0
                        };
                        let t = k as f64 / sr;
                        samples[start + k] +=
                            amplitude * ramp * (std::f64::consts::TAU * freq_hz * t + phase).sin();
                    }
                    events.push(SynthEvent {
                        class: class_list[c].clone(),
                        onset_s,
                        duration_s,
                        freq_hz,
                        amplitude,
                    });
                }
            }
            for s in &mut samples {
                *s = i16_to_unit(unit_to_i16(*s));
            }
            SynthClip {
                id: format!("{}_{i:05}", cfg.id_prefix),
                samples,
                labels,
                events,
            }
        })
        .collect();
    Ok(SynthCorpus { class_list, clips })
}

#[derive(Serialize)]
struct Annotation<'a> {
    id: &'a str,
    events: &'a [SynthEvent],
}

impl SynthCorpus {
    pub fn manifest(&self) -> Manifest {
        let records = self
            .clips
            .iter()
            .map(|c| ManifestRecord {
                id: c.id.clone(),
                path: format!("wav/{}.wav", c.id),
                labels: self
                    .class_list
                    .iter()
                    .zip(&c.labels)
                    .filter(|(_, &y)| y)
                    .map(|(n, _)| n.clone())
                    .collect(),
            })
            .collect();
        Manifest::new(self.class_list.clone(), records).expect("synthetic manifest is consistent")
    }

    /// Writes `wav/<id>.wav`, `manifest.jsonl` and `annotations.jsonl`
    /// under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        let wav_dir = dir.join("wav");
        std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
        for clip in &self.clips {
            write_wav16(wav_dir.join(format!("{}.wav", clip.id)), &clip.samples, SAMPLE_RATE)?;
        }
        let mut manifest = self.manifest();
        manifest.save(dir.join("manifest.jsonl"))?;
        manifest.base_dir = dir.to_path_buf();
        let mut notes = String::new();
        for clip in &self.clips {
            notes.push_str(&serde_json::to_string(&Annotation {
                id: &clip.id,
                events: &clip.events,
            })?);
            notes.push('\n');
        }
        let path = dir.join("annotations.jsonl");
        std::fs::write(&path, notes).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}
