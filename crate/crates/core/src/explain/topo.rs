use serde::{Deserialize, Serialize};

use super::RelevanceMap;
use crate::error::{bail, Result};

/// One value per channel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopoVector {
    pub values: Vec<f64>,
}

impl TopoVector {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Min-max scale to `[0, 1]`; a constant vector maps to all 0.5.
pub fn normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Mean over time per channel, then over maps, then min-max normalized.
pub fn topographic_relevance(maps: &[RelevanceMap]) -> Result<TopoVector> {
    let Some(first) = maps.first() else {
        bail!(Contract, "topographic relevance needs at least one map");
    };
    let (n_c, n_t) = (first.n_c, first.n_t);
    let mut acc = vec![0.0; n_c];
    for m in maps {
        if (m.n_c, m.n_t) != (n_c, n_t) {
            bail!(
                Dimension,
                "relevance maps disagree in shape: {n_c}x{n_t} vs {}x{}",
                m.n_c,
                m.n_t
            );
        }
        for (c, a) in acc.iter_mut().enumerate() {
            *a += m.channel(c).iter().sum::<f64>() / n_t as f64;
        }
    }
    for a in &mut acc {
        *a /= maps.len() as f64;
    }
    Ok(TopoVector {
        values: normalize(&acc),
    })
}
