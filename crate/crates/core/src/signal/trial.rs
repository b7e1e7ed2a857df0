use crate::error::{bail, Result};

/// One labelled multichannel recording, row-major `[n_c × n_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    x: Vec<f32>,
    n_c: usize,
    n_t: usize,
    label: usize,
    subject: u16,
    sample_rate: f64,
}

pub const NUM_CLASSES: usize = 2;

impl Trial {
    pub fn new(
        x: Vec<f32>,
        n_c: usize,
        n_t: usize,
        label: usize,
        subject: u16,
        sample_rate: f64,
    ) -> Result<Self> {
        if n_c < 2 {
            bail!(Config, "a trial needs at least 2 channels, got {n_c}");
        }
        if !(sample_rate > 0.0) {
            bail!(Config, "sample rate must be positive, got {sample_rate}");
        }
        if (n_t as f64) < sample_rate {
            bail!(
                Config,
                "a trial needs at least 1 s of signal ({sample_rate} samples), got {n_t}"
            );
        }
        if x.len() != n_c * n_t {
            bail!(
                Dimension,
                "trial data has {} values, expected {n_c}x{n_t}",
                x.len()
            );
        }
        if label >= NUM_CLASSES {
            bail!(
                Config,
                "class index {label} out of range for {NUM_CLASSES} classes"
            );
        }
        Ok(Trial {
            x,
            n_c,
            n_t,
            label,
            subject,
            sample_rate,
        })
    }

    /// Same metadata, new samples (length must be `n_c × n_t`).
    pub fn with_data(&self, x: Vec<f32>, n_t: usize, sample_rate: f64) -> Result<Self> {
        Trial::new(x, self.n_c, n_t, self.label, self.subject, sample_rate)
    }

    pub fn data(&self) -> &[f32] {
        &self.x
    }
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.x[c * self.n_t..(c + 1) * self.n_t]
    }
    pub fn n_c(&self) -> usize {
        self.n_c
    }
    pub fn n_t(&self) -> usize {
        self.n_t
    }
    pub fn label(&self) -> usize {
        self.label
    }
    pub fn one_hot(&self) -> [f32; NUM_CLASSES] {
        let mut y = [0.0; NUM_CLASSES];
        y[self.label] = 1.0;
        y
    }
    pub fn subject(&self) -> u16 {
        self.subject
    }
    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Channels as `f64` rows.
    pub(crate) fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_c)
            .map(|c| self.channel(c).iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub(crate) fn from_rows(&self, rows: &[Vec<f64>], sample_rate: f64) -> Result<Self> {
        let n_t = rows.first().map_or(0, Vec::len);
        let x = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| v as f32))
            .collect();
        self.with_data(x, n_t, sample_rate)
    }
}
