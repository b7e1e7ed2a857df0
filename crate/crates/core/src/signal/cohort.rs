//! Synthetic multi-subject cohort: a class-dependent band-power effect on two
//! lateral channel groups, shared by all subjects, on top of per-subject
//! spectral tilt, channel mixing, gain and noise.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Trial;
use crate::error::{bail, Result};
use crate::parallel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nuisance {
    /// Range of the per-subject 1/f^tilt background exponent.
    pub tilt_range: (f64, f64),
    /// Scale of the per-subject random channel-mixing perturbation.
    pub mixing_strength: f64,
    /// Range of the per-subject white-noise standard deviation.
    pub noise_floor: (f64, f64),
    /// Range of the per-subject overall amplitude gain.
    pub gain_range: (f64, f64),
    /// Per-subject shift of the rhythm peak, uniform in +/- this many Hz.
    pub peak_jitter_hz: f64,
}

impl Nuisance {
    /// No between-subject differences.
    pub fn none() -> Self {
        Nuisance {
            tilt_range: (1.0, 1.0),
            mixing_strength: 0.0,
            noise_floor: (0.3, 0.3),
            gain_range: (1.0, 1.0),
            peak_jitter_hz: 0.0,
        }
    }

    pub fn moderate() -> Self {
        Nuisance {
            tilt_range: (0.5, 1.8),
            mixing_strength: 0.4,
            noise_floor: (0.2, 0.8),
            gain_range: (0.6, 1.6),
            peak_jitter_hz: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub num_subjects: usize,
    pub trials_per_class: usize,
    pub n_c: usize,
    pub n_t: usize,
    pub sample_rate: f64,
    pub class_band: (f64, f64),
    /// Relative band-amplitude change on the lateral groups (0 = no class signal).
    pub modulation: f64,
    /// Rhythm RMS relative to the unit-RMS background.
    pub rhythm_amplitude: f64,
    pub nuisance: Nuisance,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            num_subjects: 8,
            trials_per_class: 60,
            n_c: 8,
            n_t: 256,
            sample_rate: 128.0,
            class_band: (8.0, 13.0),
            modulation: 0.4,
            rhythm_amplitude: 1.0,
            nuisance: Nuisance::moderate(),
            seed: 0,
        }
    }
}

/// Left and right lateral channel groups on the ring montage.
pub fn lateral_groups(n_c: usize) -> (Vec<usize>, Vec<usize>) {
    let g = (n_c / 4).max(1);
    let start = (n_c / 4).saturating_sub(g / 2);
    let left: Vec<usize> = (start..start + g).collect();
    let right = left.iter().map(|c| (c + n_c / 2) % n_c).collect();
    (left, right)
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_c < 2 {
            bail!(Config, "cohort needs at least 2 channels, got {}", self.n_c);
        }
        if self.num_subjects == 0 || self.trials_per_class == 0 {
            bail!(
                Config,
                "cohort needs at least one subject and one trial per class"
            );
        }
        if self.num_subjects > u16::MAX as usize + 1 {
            bail!(
                Config,
                "at most {} subjects fit a 16-bit id",
                u16::MAX as usize + 1
            );
        }
        let (lo, hi) = self.class_band;
        if !(0.0 < lo && lo < hi && hi < self.sample_rate / 2.0) {
            bail!(
                Config,
                "class band [{lo}, {hi}] Hz must lie inside (0, {}) Hz",
                self.sample_rate / 2.0
            );
        }
        if !(0.0..1.0).contains(&self.modulation) {
            bail!(Config, "modulation {} must lie in [0, 1)", self.modulation);
        }
        let nz = &self.nuisance;
        let ordered = |(a, b): (f64, f64)| a <= b && a >= 0.0;
        if !ordered(nz.tilt_range)
            || !ordered(nz.noise_floor)
            || !ordered(nz.gain_range)
            || nz.gain_range.0 <= 0.0
        {
            bail!(
                Config,
                "nuisance ranges must be ordered and nonnegative (gain positive)"
            );
        }
        if (self.n_t as f64) < self.sample_rate {
            bail!(
                Config,
                "trials need at least 1 s of signal ({} samples), got {}",
                self.sample_rate,
                self.n_t
            );
        }
        Ok(())
    }

    /// Channels whose class-band power rises for class `class`.
    pub fn ground_truth_group(&self, class: usize) -> Vec<usize> {
        let (left, right) = lateral_groups(self.n_c);
        if class == 0 {
            right
        } else {
            left
        }
    }
}

struct Subject {
    tilt: f64,
    mixing: Vec<f64>,
    noise: f64,
    gain: f64,
    peak: f64,
}

fn uniform(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.random_range(a..b)
    }
}

fn subject_profile(spec: &CohortSpec, s: usize) -> Subject {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(s as u64);
    let nz = &spec.nuisance;
    let n = spec.n_c;
    let mut mixing = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let q: f64 = StandardNormal.sample(&mut rng);
            mixing[i * n + j] = f64::from(i == j) + nz.mixing_strength * q / (n as f64).sqrt();
        }
    }
    let (lo, hi) = spec.class_band;
    let centre = 0.5 * (lo + hi);
    let shift = uniform(&mut rng, (-nz.peak_jitter_hz, nz.peak_jitter_hz));
    Subject {
        tilt: uniform(&mut rng, nz.tilt_range),
        noise: uniform(&mut rng, nz.noise_floor),
        gain: uniform(&mut rng, nz.gain_range),
        peak: (centre + shift).clamp(lo, hi),
        mixing,
    }
}

struct Shaper {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    n: usize,
    fs: f64,
}

impl Shaper {
    /// Gaussian noise with amplitude spectrum `shape(f)`, scaled to unit RMS.
    fn noise(&self, rng: &mut ChaCha8Rng, shape: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.n;
        let mut buf: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
            .collect();
        self.fwd.process(&mut buf);
        for (k, b) in buf.iter_mut().enumerate() {
            let f = k.min(n - k) as f64 * self.fs / n as f64;
            *b *= if k == 0 { 0.0 } else { shape(f) };
        }
        self.inv.process(&mut buf);
        let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if rms > 0.0 {
            out.iter_mut().for_each(|v| *v /= rms);
        }
        out
    }
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<Trial>> {
    spec.validate()?;
    let subjects: Vec<Subject> = (0..spec.num_subjects)
        .map(|s| subject_profile(spec, s))
        .collect();
    let mut planner = FftPlanner::new();
    let shaper = Shaper {
        fwd: planner.plan_fft_forward(spec.n_t),
        inv: planner.plan_fft_inverse(spec.n_t),
        n: spec.n_t,
        fs: spec.sample_rate,
    };
    let (left, right) = lateral_groups(spec.n_c);
    let per_subject = 2 * spec.trials_per_class;
    let width = (spec.class_band.1 - spec.class_band.0) / 4.0;
    parallel::map_indexed(spec.num_subjects * per_subject, |idx| {
        let (s, i) = (idx / per_subject, idx % per_subject);
        let sub = &subjects[s];
        let label = i % 2;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(((s as u64 + 1) << 32) | i as u64);
        let (n_c, n_t) = (spec.n_c, spec.n_t);
        let sources: Vec<Vec<f64>> = (0..n_c)
            .map(|c| {
                let bg = shaper.noise(&mut rng, |f| f.max(1.0).powf(-sub.tilt / 2.0));
                let rhythm = shaper.noise(&mut rng, |f| {
                    (-0.5 * ((f - sub.peak) / width).powi(2)).exp()
                });
                let z: f64 = StandardNormal.sample(&mut rng);
                let jitter = 0.15 * z;
                let m = spec.modulation;
                let effect = if left.contains(&c) {
                    if label == 0 {
                        1.0 - m
                    } else {
                        1.0 + m
                    }
                } else if right.contains(&c) {
                    if label == 0 {
                        1.0 + m
                    } else {
                        1.0 - m
                    }
                } else {
                    1.0
                };
                let amp = spec.rhythm_amplitude * effect * jitter.exp();
                bg.iter().zip(&rhythm).map(|(b, r)| b + amp * r).collect()
            })
            .collect();
        let mut x = Vec::with_capacity(n_c * n_t);
        for c in 0..n_c {
            let row = &sub.mixing[c * n_c..(c + 1) * n_c];
            for t in 0..n_t {
                let mixed: f64 = row.iter().zip(&sources).map(|(w, src)| w * src[t]).sum();
                let e: f64 = StandardNormal.sample(&mut rng);
                x.push((sub.gain * mixed + sub.noise * e) as f32);
            }
        }
        Trial::new(x, n_c, n_t, label, s as u16, spec.sample_rate)
    })
    .into_iter()
    .collect()
}
