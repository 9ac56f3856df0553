use crate::error::{Error, Result};

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peaks, equally spaced on the mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_fft_bins: usize,
    /// Row-major `n_mels × n_fft_bins`.
    pub weights: Vec<f64>,
    pub f_lo: f64,
    pub f_hi: f64,
    /// Peak frequency of each filter in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_fft_bins..(mel + 1) * self.n_fft_bins]
    }

    /// Integrates a power spectrum of length `n_fft_bins` into `out`.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_fft_bins);
        for (m, o) in out.iter_mut().enumerate() {
            *o = self
                .row(m)
                .iter()
                .zip(power)
                .filter(|(w, _)| **w > 0.0)
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_lo: f64,
    f_hi: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_lo >= 0.0 && f_lo < f_hi && f_hi <= nyquist) {
        return Err(Error::InvalidRange(format!(
            "need 0 <= f_lo < f_hi <= {nyquist} Hz, got f_lo={f_lo}, f_hi={f_hi}"
        )));
    }
    if n_mels < 2 {
        return Err(Error::InvalidRange(format!("n_mels must be >= 2, got {n_mels}")));
    }
    if n_fft < 2 {
        return Err(Error::InvalidRange(format!("n_fft must be >= 2, got {n_fft}")));
    }
    let n_bins = n_fft / 2 + 1;
    let (mel_lo, mel_hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
    let step = (mel_hi - mel_lo) / (n_mels + 1) as f64;
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;

    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            *w = rise.min(fall).max(0.0);
        }
        if !row.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidRange(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; \
                 raise f_lo, lower n_mels or use a longer FFT"
            )));
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_fft_bins: n_bins,
        weights,
        f_lo,
        f_hi,
        centers: edges[1..=n_mels].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_reference_points() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        let expected = 2595.0 * 2f64.log10();
        assert!((hz_to_mel(700.0) - expected).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        for f in [0.0, 125.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }

    #[test]
    fn default_shape() {
        let fb = mel_filterbank(64, 512, 16_000, 0.0, 8000.0).unwrap();
        assert_eq!((fb.n_mels, fb.n_fft_bins), (64, 257));
        assert_eq!(fb.weights.len(), 64 * 257);
    }

    #[test]
    fn rows_nonnegative_nonempty_unimodal() {
        for (n_mels, f_lo) in [(64, 0.0), (128, 100.0)] {
            let fb = mel_filterbank(n_mels, 512, 16_000, f_lo, 8000.0).unwrap();
            for m in 0..n_mels {
                let row = fb.row(m);
                assert!(row.iter().all(|&w| w >= 0.0));
                assert!(row.iter().any(|&w| w > 0.0), "row {m} empty");
                let peak = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &w)| if w > row[best] { i } else { best });
                assert!(row[..=peak].windows(2).all(|p| p[0] <= p[1]));
                assert!(row[peak..].windows(2).all(|p| p[0] >= p[1]));
            }
        }
    }

    #[test]
    fn triangles_partition_between_outer_peaks() {
        let fb = mel_filterbank(64, 512, 16_000, 0.0, 8000.0).unwrap();
        let (first, last) = (fb.centers[0], fb.centers[63]);
        for k in 0..fb.n_fft_bins {
            let f = k as f64 * 16_000.0 / 512.0;
            if f > first && f < last {
                let sum: f64 = (0..64).map(|m| fb.row(m)[k]).sum();
                assert!((sum - 1.0).abs() < 1e-6, "bin {k}: {sum}");
            }
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(matches!(
            mel_filterbank(64, 512, 16_000, 100.0, 9000.0),
            Err(Error::InvalidRange(_))
        ));
        assert!(matches!(
            mel_filterbank(64, 512, 16_000, 500.0, 500.0),
            Err(Error::InvalidRange(_))
        ));
        assert!(matches!(
            mel_filterbank(1, 512, 16_000, 0.0, 8000.0),
            Err(Error::InvalidRange(_))
        ));
        // 128 filters starting at 0 Hz are narrower than one 31.25 Hz bin.
        assert!(matches!(
            mel_filterbank(128, 512, 16_000, 0.0, 8000.0),
            Err(Error::InvalidRange(_))
        ));
    }
}
