//! Butterworth IIR design as second-order sections and zero-phase filtering.

use rustfft::num_complex::Complex64;

use crate::error::{bail, Result};

/// One biquad: `[b0, b1, b2, a1, a2]` with `a0 = 1`.
pub type Section = [f64; 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Low,
    High,
}

fn butter(order: usize, cutoff: f64, fs: f64, kind: Kind) -> Result<Vec<Section>> {
    if order == 0 {
        bail!(Config, "filter order must be positive");
    }
    if !(cutoff > 0.0 && cutoff < fs / 2.0) {
        bail!(Config, "cutoff {cutoff} Hz outside (0, {}) Hz", fs / 2.0);
    }
    let k = 2.0 * fs;
    let warped = k * (std::f64::consts::PI * cutoff / fs).tan();
    let n = order as f64;
    let digital = |i: usize| {
        let theta = std::f64::consts::PI * (2.0 * i as f64 + n + 1.0) / (2.0 * n);
        let proto = Complex64::from_polar(1.0, theta);
        let s = match kind {
            Kind::Low => proto * warped,
            Kind::High => Complex64::new(warped, 0.0) / proto,
        };
        (k + s) / (k - s)
    };
    // Numerator roots: z = -1 for low-pass, z = +1 for high-pass.
    let zr = if kind == Kind::Low { -1.0 } else { 1.0 };
    // Unit gain at DC (low-pass) or Nyquist (high-pass).
    let z_ref = -zr;
    let mut sos = Vec::new();
    for i in 0..order / 2 {
        let p = digital(i);
        let (a1, a2) = (-2.0 * p.re, p.norm_sqr());
        let (b0, b1, b2) = (1.0, -2.0 * zr, 1.0);
        let num = b0 + b1 * z_ref + b2;
        let den = 1.0 + a1 * z_ref + a2;
        let g = den / num;
        sos.push([g * b0, g * b1, g * b2, a1, a2]);
    }
    if order % 2 == 1 {
        let p = digital(order / 2).re;
        let num = 1.0 - zr * z_ref;
        let den = 1.0 - p * z_ref;
        let g = den / num;
        sos.push([g, -g * zr, 0.0, -p, 0.0]);
    }
    Ok(sos)
}

pub fn butter_lowpass(order: usize, cutoff: f64, fs: f64) -> Result<Vec<Section>> {
    butter(order, cutoff, fs, Kind::Low)
}

pub fn butter_highpass(order: usize, cutoff: f64, fs: f64) -> Result<Vec<Section>> {
    butter(order, cutoff, fs, Kind::High)
}

/// High-pass at `low` cascaded with low-pass at `high`, each of `order`.
pub fn butter_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<Vec<Section>> {
    if !(0.0 < low && low < high && high < fs / 2.0) {
        bail!(
            Config,
            "band [{low}, {high}] Hz must satisfy 0 < low < high < Nyquist ({})",
            fs / 2.0
        );
    }
    let mut sos = butter_highpass(order, low, fs)?;
    sos.extend(butter_lowpass(order, high, fs)?);
    Ok(sos)
}

/// Magnitude response at `f` Hz.
pub fn magnitude(sos: &[Section], f: f64, fs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f / fs;
    let z1 = Complex64::from_polar(1.0, -w);
    let z2 = z1 * z1;
    sos.iter()
        .map(|s| ((s[0] + s[1] * z1 + s[2] * z2) / (1.0 + s[3] * z1 + s[4] * z2)).norm())
        .product()
}

/// Steady-state section states for a unit-step input.
fn sos_zi(sos: &[Section]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let h = (s[0] + s[1] + s[2]) / (1.0 + s[3] + s[4]);
            let y = h;
            let z2 = s[2] - s[4] * y;
            let z1 = y - s[0];
            let out = [scale * z1, scale * z2];
            scale *= h;
            out
        })
        .collect()
}

fn sosfilt(sos: &[Section], x: &mut [f64], zi: &[[f64; 2]], x0: f64) {
    for (s, z) in sos.iter().zip(zi) {
        let (mut z1, mut z2) = (z[0] * x0, z[1] * x0);
        for v in x.iter_mut() {
            let xin = *v;
            let y = s[0] * xin + z1;
            z1 = s[1] * xin - s[3] * y + z2;
            z2 = s[2] * xin - s[4] * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with odd-extension padding and steady-state
/// initial conditions; zero phase, squared magnitude.
pub fn filtfilt(sos: &[Section], x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let pad = (3 * (2 * sos.len() + 1)).min(n.saturating_sub(1));
    if n < 2 {
        bail!(Config, "signal of {n} samples is too short to filter");
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let zi = sos_zi(sos);
    let x0 = ext[0];
    sosfilt(sos, &mut ext, &zi, x0);
    ext.reverse();
    let y0 = ext[0];
    sosfilt(sos, &mut ext, &zi, y0);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}
