//! ε-rule relevance propagation, channel topographies of relevance, and
//! feature / PSD exports for external plotting.

mod export;
mod lrp;
mod topo;


use std::io::Write;

use crate::error::Result;
use crate::model::Model;
use crate::signal::{Trial, NUM_CLASSES};
use crate::training::predict;

pub use export::{
    class_psd, embeddings, export_embeddings, read_embeddings, write_embeddings, write_psd,
    ClassPsd, EmbeddingRow, FEATURE_KINDS,
};
pub use lrp::{lrp_epsilon, Lrp, LrpTrace, RelevanceMap, StepOp, StepRelevance, DEFAULT_EPS};
pub use topo::{normalize, topographic_relevance, TopoVector};

/// Class-conditional topographies: for each class, the relevance of the
/// class logit averaged over correctly classified trials of that class (all
/// trials of the class if none is correct).
pub fn class_topomaps(lrp: &Lrp, model: &Model<f32>, trials: &[&Trial]) -> Result<Vec<TopoVector>> {
    let pred = predict(model, trials)?;
    let mut out = Vec::with_capacity(NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        let of_class: Vec<usize> = (0..trials.len()).filter(|&i| trials[i].label() == class).collect();
        let correct: Vec<usize> = of_class.iter().copied().filter(|&i| pred[i] == class).collect();
        let pick = if correct.is_empty() { of_class } else { correct };
        let maps = pick
            .iter()
            .map(|&i| lrp.explain(trials[i], class))
            .collect::<Result<Vec<_>>>()?;
        out.push(topographic_relevance(&maps)?);
    }
    Ok(out)
}

/// CSV `class,channel,relevance`.
pub fn write_topomaps<W: Write>(w: W, maps: &[TopoVector]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "channel", "relevance"])?;
    for (class, m) in maps.iter().enumerate() {
        for (c, v) in m.values.iter().enumerate() {
            out.write_record([class.to_string(), c.to_string(), v.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
