//! Audio ingestion and per-second log-mel instance extraction.
//!
//! A clip is cut into non-overlapping segments of `segment_s` seconds. Each
//! segment becomes one [`LogMelInstance`]: a Hann-windowed STFT (400-sample
//! frames, 160-sample hop, 512-point FFT at 16 kHz), power spectrum, mel
//! integration and a floored natural log. An optional second channel holds
//! the first delta over time.

mod mel;
mod wav;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use wav::{i16_to_unit, load_wav, read_wav, unit_to_i16, write_wav16, AudioClip, SAMPLE_RATE};

/// Floor applied to mel energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub with_delta: bool,
    pub frame_ms: u32,
    pub hop_ms: u32,
    pub segment_s: u32,
    pub n_fft: usize,
    pub f_lo: f64,
    pub f_hi: f64,
}

impl FeatureConfig {
    /// 64 mel bins plus a delta channel, as fed to the instance classifier.
    pub fn mil() -> Self {
        Self {
            n_mels: 64,
            with_delta: true,
            frame_ms: 25,
            hop_ms: 10,
            segment_s: 1,
            n_fft: 512,
            f_lo: 0.0,
            f_hi: 8000.0,
        }
    }

    /// 128 mel bins without delta, as fed to the embedding network. The band
    /// starts at 100 Hz because the lowest 128-band filters are narrower than
    /// one FFT bin below that.
    pub fn embedding() -> Self {
        Self {
            n_mels: 128,
            with_delta: false,
            f_lo: 100.0,
            ..Self::mil()
        }
    }

    pub fn frame_len(&self) -> usize {
        (SAMPLE_RATE * self.frame_ms / 1000) as usize
    }

    pub fn hop_len(&self) -> usize {
        (SAMPLE_RATE * self.hop_ms / 1000) as usize
    }

    pub fn segment_len(&self) -> usize {
        (SAMPLE_RATE * self.segment_s) as usize
    }

    pub fn frames_per_segment(&self) -> usize {
        (self.segment_len() - self.frame_len()) / self.hop_len() + 1
    }

    pub fn channels(&self) -> usize {
        if self.with_delta {
            2
        } else {
            1
        }
    }

    /// Shape of one instance as `[channels, n_mels, frames]`.
    pub fn instance_shape(&self) -> [usize; 3] {
        [self.channels(), self.n_mels, self.frames_per_segment()]
    }

    pub fn instance_len(&self) -> usize {
        self.instance_shape().iter().product()
    }

    /// Number of instances a clip of `n_samples` yields: whole segments plus
    /// one zero-padded segment when the remainder is at least half a segment.
    pub fn instance_count(&self, n_samples: usize) -> usize {
        let seg = self.segment_len();
        n_samples / seg + usize::from(2 * (n_samples % seg) >= seg)
    }

    fn validate(&self) -> Result<()> {
        let frame = self.frame_len();
        let hop = self.hop_len();
        if frame == 0 || hop == 0 || frame > self.segment_len() || frame > self.n_fft {
            return Err(Error::InvalidConfig(format!(
                "frame {frame}, hop {hop}, segment {} and FFT {} are inconsistent",
                self.segment_len(),
                self.n_fft
            )));
        }
        Ok(())
    }
}

/// One segment's log-mel tensor. `values` is laid out channel-major as
/// `[channel][mel][frame]`, i.e. directly usable as a `C × H × W` image.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelInstance {
    pub n_mels: usize,
    pub frames: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl LogMelInstance {
    pub fn get(&self, mel: usize, frame: usize, channel: usize) -> f64 {
        self.values[(channel * self.n_mels + mel) * self.frames + frame]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.n_mels, self.frames]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// Reusable STFT + filterbank state for one [`FeatureConfig`].
#[derive(Clone)]
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let filterbank = mel_filterbank(cfg.n_mels, cfg.n_fft, SAMPLE_RATE, cfg.f_lo, cfg.f_hi)?;
        let n = cfg.frame_len();
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Splits a clip into instances following the segmentation policy of
    /// [`FeatureConfig::instance_count`].
    pub fn extract(&self, clip: &AudioClip) -> Result<Vec<LogMelInstance>> {
        segment_clip(clip, &self.cfg)?
            .iter()
            .map(|seg| self.extract_segment(seg))
            .collect()
    }

    /// [`FeatureExtractor::extract`] flattened to one vector per instance.
    pub fn extract_vectors(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        Ok(self.extract(clip)?.into_iter().map(LogMelInstance::into_vec).collect())
    }

    /// Features for exactly one segment of audio.
    pub fn extract_segment(&self, samples: &[f64]) -> Result<LogMelInstance> {
        let seg = self.cfg.segment_len();
        if samples.len() != seg {
            return Err(Error::ShapeMismatch {
                expected: format!("{seg} samples"),
                got: format!("{} samples", samples.len()),
            });
        }
        let frames = self.cfg.frames_per_segment();
        let n_mels = self.cfg.n_mels;
        let frame_len = self.cfg.frame_len();
        let hop = self.cfg.hop_len();
        let n_bins = self.filterbank.n_fft_bins;

        let mut logmel = vec![0.0; n_mels * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        let mut energies = vec![0.0; n_mels];
        for t in 0..frames {
            let frame = &samples[t * hop..t * hop + frame_len];
            for (b, (s, w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(s * w, 0.0);
            }
            buf[frame_len..].fill(Complex::new(0.0, 0.0));
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut energies);
            for (m, e) in energies.iter().enumerate() {
                logmel[m * frames + t] = e.max(LOG_FLOOR).ln();
            }
        }

        let channels = self.cfg.channels();
        let mut values = logmel;
        if self.cfg.with_delta {
            let delta = delta_over_time(&values, n_mels, frames);
            values.extend_from_slice(&delta);
        }
        Ok(LogMelInstance {
            n_mels,
            frames,
            channels,
            values,
        })
    }
}

/// Symmetric first difference along time with replicated edges.
fn delta_over_time(values: &[f64], rows: usize, frames: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * frames];
    for r in 0..rows {
        let row = &values[r * frames..(r + 1) * frames];
        for t in 0..frames {
            let next = row[(t + 1).min(frames - 1)];
            let prev = row[t.saturating_sub(1)];
            out[r * frames + t] = 0.5 * (next - prev);
        }
    }
    out
}

/// One-shot convenience over [`FeatureExtractor`].
/// Cuts a clip into whole segments; a trailing remainder of at least half a
/// segment is zero-padded, a shorter one dropped.
pub fn segment_clip(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedSampleRate(clip.sample_rate));
    }
    let seg = cfg.segment_len();
    let count = cfg.instance_count(clip.samples.len());
    if count == 0 || 2 * clip.samples.len() < seg {
        return Err(Error::ClipTooShort {
            id: clip.id.clone(),
            seconds: clip.duration_secs(),
        });
    }
    Ok((0..count)
        .map(|i| {
            let start = i * seg;
            let end = (start + seg).min(clip.samples.len());
            let mut s = clip.samples[start..end].to_vec();
            s.resize(seg, 0.0);
            s
        })
        .collect())
}

pub fn extract_instances(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Vec<LogMelInstance>> {
    FeatureExtractor::new(cfg.clone())?.extract(clip)
}
