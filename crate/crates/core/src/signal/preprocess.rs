//! Per-trial preprocessing: bandpass, Laplacian re-referencing, baseline
//! segmentation and decimation.

use super::filter::{butter_bandpass, butter_lowpass, filtfilt};
use super::Trial;
use crate::error::{bail, Result};

pub const DEFAULT_BAND: (f64, f64) = (4.0, 40.0);
/// Order of each Butterworth half of the bandpass (high-pass and low-pass).
pub const BANDPASS_ORDER: usize = 6;
const ANTI_ALIAS_ORDER: usize = 8;
/// Anti-alias cutoff as a fraction of the target Nyquist frequency.
const ANTI_ALIAS_FRACTION: f64 = 0.8;

pub fn bandpass(x: &Trial, low: f64, high: f64) -> Result<Trial> {
    bandpass_with_order(x, low, high, BANDPASS_ORDER)
}

pub fn bandpass_with_order(x: &Trial, low: f64, high: f64, order: usize) -> Result<Trial> {
    let sos = butter_bandpass(order, low, high, x.sample_rate())?;
    let rows = x
        .rows()
        .iter()
        .map(|r| filtfilt(&sos, r))
        .collect::<Result<Vec<_>>>()?;
    x.from_rows(&rows, x.sample_rate())
}

/// `out[c] = x[c] - mean(x[n] for n in neighbors[c])`.
pub fn laplacian_reference(x: &Trial, neighbors: &[Vec<usize>]) -> Result<Trial> {
    if neighbors.len() != x.n_c() {
        bail!(
            Config,
            "neighbor map has {} entries for {} channels",
            neighbors.len(),
            x.n_c()
        );
    }
    let n_t = x.n_t();
    let mut out = Vec::with_capacity(x.data().len());
    for (c, ns) in neighbors.iter().enumerate() {
        if ns.is_empty() {
            bail!(Config, "channel {c} has an empty neighbor set");
        }
        if let Some(&bad) = ns.iter().find(|&&n| n >= x.n_c()) {
            bail!(
                Config,
                "channel {c} lists neighbor {bad}, but there are {} channels",
                x.n_c()
            );
        }
        let inv = 1.0 / ns.len() as f64;
        let own = x.channel(c);
        for t in 0..n_t {
            let m: f64 = ns.iter().map(|&n| x.channel(n)[t] as f64).sum::<f64>() * inv;
            out.push((own[t] as f64 - m) as f32);
        }
    }
    x.with_data(out, n_t, x.sample_rate())
}

/// Neighbors at ring distance `distance` on either side (a "large" Laplacian
/// for distance 2 on a ring montage).
pub fn ring_neighbors(n_c: usize, distance: usize) -> Vec<Vec<usize>> {
    (0..n_c)
        .map(|c| {
            let mut v = vec![(c + distance) % n_c, (c + n_c - distance % n_c) % n_c];
            v.sort_unstable();
            v.dedup();
            v.retain(|&n| n != c);
            v
        })
        .collect()
}

/// Extract the task segment of a rest-then-task record, trimming `trim_s`
/// seconds from each end and subtracting the per-channel rest mean.
pub fn segment_baseline(
    raw: &Trial,
    rest_len_s: f64,
    task_len_s: f64,
    trim_s: f64,
) -> Result<Trial> {
    if task_len_s <= 2.0 * trim_s {
        bail!(
            Config,
            "task length {task_len_s} s must exceed twice the trim ({trim_s} s)"
        );
    }
    let fs = raw.sample_rate();
    let rest = (rest_len_s * fs).round() as usize;
    let task = (task_len_s * fs).round() as usize;
    let trim = (trim_s * fs).round() as usize;
    if rest == 0 {
        bail!(Config, "rest segment of {rest_len_s} s holds no samples");
    }
    if rest + task > raw.n_t() {
        bail!(
            Config,
            "record of {} samples is shorter than rest+task ({})",
            raw.n_t(),
            rest + task
        );
    }
    let (start, end) = (rest + trim, rest + task - trim);
    let mut out = Vec::with_capacity(raw.n_c() * (end - start));
    for c in 0..raw.n_c() {
        let ch = raw.channel(c);
        let mean = ch[..rest].iter().map(|&v| v as f64).sum::<f64>() / rest as f64;
        out.extend(ch[start..end].iter().map(|&v| (v as f64 - mean) as f32));
    }
    raw.with_data(out, end - start, fs)
}

/// Anti-alias low-pass below the target Nyquist, then integer decimation.
pub fn downsample(x: &Trial, target_rate: f64) -> Result<Trial> {
    let fs = x.sample_rate();
    if !(target_rate > 0.0) || target_rate > fs {
        bail!(
            Config,
            "target rate {target_rate} Hz must lie in (0, {fs}] Hz"
        );
    }
    let ratio = fs / target_rate;
    let q = ratio.round() as usize;
    if (ratio - q as f64).abs() > 1e-9 {
        bail!(
            Config,
            "{fs} Hz -> {target_rate} Hz is not an integer decimation"
        );
    }
    if q == 1 {
        return Ok(x.clone());
    }
    let sos = butter_lowpass(
        ANTI_ALIAS_ORDER,
        ANTI_ALIAS_FRACTION * target_rate / 2.0,
        fs,
    )?;
    let rows = x
        .rows()
        .iter()
        .map(|r| Ok(filtfilt(&sos, r)?.into_iter().step_by(q).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    x.from_rows(&rows, target_rate)
}
