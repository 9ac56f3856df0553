use std::io::Read;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono PCM audio normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let id = id.into();
        if sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedSampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(Error::MalformedWav(format!("clip `{id}` has no samples")));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::MalformedWav(format!(
                "clip `{id}` contains non-finite samples"
            )));
        }
        Ok(Self {
            id,
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Normalizes a signed 16-bit sample by 1/32768.
pub fn i16_to_unit(sample: i16) -> f64 {
    sample as f64 / 32768.0
}

/// Reads a RIFF/WAVE file, averaging channels to mono. The clip id is the
/// file stem.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav(id, std::io::BufReader::new(file))
}

pub fn read_wav<R: Read>(id: impl Into<String>, reader: R) -> Result<AudioClip> {
    let mut reader = WavReader::new(reader).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedSampleRate(spec.sample_rate));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ 8..=32) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(map_hound)?
        }
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (format, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{bits}-bit {format:?} samples"
            )))
        }
    };
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedWav("zero channels".into()));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    AudioClip::new(id, samples, spec.sample_rate)
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::Unsupported => Error::UnsupportedEncoding("non-PCM format tag".into()),
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::MalformedWav("unexpected end of file".into())
        }
        other => Error::MalformedWav(other.to_string()),
    }
}

/// Writes 16-bit mono PCM through [`unit_to_i16`].
pub fn write_wav16(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let hound_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::MalformedWav(other.to_string()),
    };
    let mut writer = WavWriter::create(path, spec).map_err(hound_err)?;
    for &s in samples {
        writer.write_sample(unit_to_i16(s)).map_err(hound_err)?;
    }
    writer.finalize().map_err(hound_err)
}

/// Inverse of [`i16_to_unit`] on its range; out-of-range values saturate.
pub fn unit_to_i16(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes(spec: WavSpec, frames: usize, value: i16) -> Vec<u8> {
        let mut cursor = std::io::Cursor::new(Vec::new());
        {
            let mut w = WavWriter::new(&mut cursor, spec).unwrap();
            for _ in 0..frames * spec.channels as usize {
                w.write_sample(value).unwrap();
            }
            w.finalize().unwrap();
        }
        cursor.into_inner()
    }

    fn spec(rate: u32, channels: u16) -> WavSpec {
        WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        }
    }

    #[test]
    fn ten_seconds_mono() {
        let bytes = wav_bytes(spec(16_000, 1), 160_000, 100);
        let clip = read_wav("a", bytes.as_slice()).unwrap();
        assert_eq!(clip.samples.len(), 160_000);
        assert_eq!(clip.duration_secs(), 10.0);
    }

    #[test]
    fn max_sample_normalizes_below_one() {
        let bytes = wav_bytes(spec(16_000, 1), 10, 32767);
        let clip = read_wav("a", bytes.as_slice()).unwrap();
        assert_eq!(clip.samples[0], 32767.0 / 32768.0);
        assert!((clip.samples[0] - 0.99997).abs() < 1e-5);
    }

    #[test]
    fn rejects_other_rates() {
        let bytes = wav_bytes(spec(44_100, 1), 10, 0);
        match read_wav("a", bytes.as_slice()) {
            Err(Error::UnsupportedSampleRate(44_100)) => {}
            other => panic!("unexpected {other:?}"),
        }
        let msg = Error::UnsupportedSampleRate(44_100).to_string();
        assert!(msg.contains("44100"));
    }

    #[test]
    fn stereo_is_averaged() {
        let mut cursor = std::io::Cursor::new(Vec::new());
        {
            let mut w = WavWriter::new(&mut cursor, spec(16_000, 2)).unwrap();
            for _ in 0..8 {
                w.write_sample(1000i16).unwrap();
                w.write_sample(3000i16).unwrap();
            }
            w.finalize().unwrap();
        }
        let clip = read_wav("s", cursor.into_inner().as_slice()).unwrap();
        assert_eq!(clip.samples.len(), 8);
        assert_eq!(clip.samples[0], 2000.0 / 32768.0);
    }

    #[test]
    fn float_wav_is_accepted() {
        let mut cursor = std::io::Cursor::new(Vec::new());
        {
            let spec = WavSpec {
                channels: 1,
                sample_rate: 16_000,
                bits_per_sample: 32,
                sample_format: SampleFormat::Float,
            };
            let mut w = WavWriter::new(&mut cursor, spec).unwrap();
            w.write_sample(0.25f32).unwrap();
            w.write_sample(-0.5f32).unwrap();
            w.finalize().unwrap();
        }
        let clip = read_wav("f", cursor.into_inner().as_slice()).unwrap();
        assert_eq!(clip.samples, vec![0.25, -0.5]);
    }

    #[test]
    fn garbage_is_malformed() {
        let err = read_wav("g", &b"RIFX not a wav file at all"[..]).unwrap_err();
        assert!(matches!(err, Error::MalformedWav(_)), "{err:?}");
    }

    #[test]
    fn non_pcm_format_tag_is_unsupported() {
        // A-law (format tag 6) header with a tiny data chunk.
        let mut bytes = wav_bytes(spec(16_000, 1), 4, 0);
        bytes[20] = 6;
        bytes[21] = 0;
        let err = read_wav("alaw", bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedEncoding(_)), "{err:?}");
    }
}
