use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Trial;
use crate::error::{bail, Result};

/// One-sided power spectral density, `power[c][k]` in power/Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct Psd {
    pub frequencies: Vec<f64>,
    pub power: Vec<Vec<f64>>,
}

impl Psd {
    /// Mean power over `[lo, hi]` Hz for channel `c`.
    pub fn band_power(&self, c: usize, lo: f64, hi: f64) -> f64 {
        let (sum, n) = self
            .frequencies
            .iter()
            .zip(&self.power[c])
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .fold((0.0, 0usize), |(s, n), (_, p)| (s + p, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

pub const MIN_SEGMENT: usize = 8;

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Welch estimate with a Hann window and 50% overlap.
pub fn welch_psd(x: &Trial, segment_len: usize) -> Result<Psd> {
    welch_psd_overlap(x, segment_len, segment_len / 2)
}

pub fn welch_psd_overlap(x: &Trial, segment_len: usize, overlap: usize) -> Result<Psd> {
    if segment_len < MIN_SEGMENT {
        bail!(
            Config,
            "Welch segment of {segment_len} samples is below the minimum of {MIN_SEGMENT}"
        );
    }
    if segment_len > x.n_t() {
        bail!(
            Config,
            "Welch segment of {segment_len} samples exceeds trial length {}",
            x.n_t()
        );
    }
    if overlap >= segment_len {
        bail!(
            Config,
            "overlap {overlap} must be smaller than the segment length {segment_len}"
        );
    }
    let fs = x.sample_rate();
    let step = segment_len - overlap;
    let n_seg = (x.n_t() - segment_len) / step + 1;
    let window = hann(segment_len);
    let scale = 1.0 / (fs * window.iter().map(|w| w * w).sum::<f64>());
    let n_bins = segment_len / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(segment_len);
    let mut buf = vec![Complex64::default(); segment_len];
    let mut power = vec![vec![0.0; n_bins]; x.n_c()];
    for (c, acc) in power.iter_mut().enumerate() {
        let ch = x.channel(c);
        for s in 0..n_seg {
            let seg = &ch[s * step..s * step + segment_len];
            for ((b, &v), w) in buf.iter_mut().zip(seg).zip(&window) {
                *b = Complex64::new(v as f64 * w, 0.0);
            }
            fft.process(&mut buf);
            for (k, a) in acc.iter_mut().enumerate() {
                let one_sided = if k == 0 || (segment_len % 2 == 0 && k == segment_len / 2) {
                    1.0
                } else {
                    2.0
                };
                *a += one_sided * buf[k].norm_sqr() * scale;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n_seg as f64);
    }
    let frequencies = (0..n_bins)
        .map(|k| k as f64 * fs / segment_len as f64)
        .collect();
    Ok(Psd { frequencies, power })
}
