use std::io::{Read, Write};

use crate::error::{bail, Result};
use crate::model::{batch_tensor, Model};
use crate::signal::{welch_psd, Trial, NUM_CLASSES};

const CHUNK: usize = 64;
pub const FEATURE_KINDS: [&str; 3] = ["f_ir", "f_re", "f_g"];

/// Flattened eval-mode features of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub kind: String,
    pub subject_id: u16,
    pub class: usize,
    pub values: Vec<f32>,
}

/// Per-trial `f_ir`, `f_re` and `f_g`, grouped by kind in that order.
pub fn embeddings(model: &Model<f32>, trials: &[&Trial]) -> Result<Vec<EmbeddingRow>> {
    let mut by_kind: [Vec<EmbeddingRow>; 3] = Default::default();
    for chunk in trials.chunks(CHUNK) {
        let f = model.features(batch_tensor(chunk)?)?;
        let b = chunk.len();
        for (k, t) in [&f.f_ir, &f.f_re, &f.f_g].into_iter().enumerate() {
            let d = t.len() / b;
            for (trial, row) in chunk.iter().zip(t.data().chunks_exact(d)) {
                by_kind[k].push(EmbeddingRow {
                    kind: FEATURE_KINDS[k].to_string(),
                    subject_id: trial.subject(),
                    class: trial.label(),
                    values: row.to_vec(),
                });
            }
        }
    }
    Ok(by_kind.into_iter().flatten().collect())
}

/// CSV `kind,subject_id,class,dim_0..dim_{D-1}` with `D` the widest feature;
/// narrower kinds leave the trailing cells empty.
pub fn write_embeddings<W: Write>(w: W, rows: &[EmbeddingRow]) -> Result<()> {
    let width = rows.iter().map(|r| r.values.len()).max().unwrap_or(0);
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["kind".to_string(), "subject_id".into(), "class".into()];
    header.extend((0..width).map(|i| format!("dim_{i}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.kind.clone(), r.subject_id.to_string(), r.class.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        rec.resize(3 + width, String::new());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_embeddings<W: Write>(w: W, model: &Model<f32>, trials: &[&Trial]) -> Result<()> {
    write_embeddings(w, &embeddings(model, trials)?)
}

pub fn read_embeddings<R: Read>(r: R) -> Result<Vec<EmbeddingRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| crate::Error::Format(format!("embedding row: bad {what}"));
        let values = rec
            .iter()
            .skip(3)
            .take_while(|s| !s.is_empty())
            .map(|s| s.parse::<f32>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            kind: field(0).to_string(),
            subject_id: field(1).parse().map_err(|_| bad("subject_id"))?,
            class: field(2).parse().map_err(|_| bad("class"))?,
            values,
        });
    }
    Ok(rows)
}

/// Class-averaged Welch PSD per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPsd {
    pub class: usize,
    pub frequencies: Vec<f64>,
    /// `[channel][frequency]`.
    pub power: Vec<Vec<f64>>,
}

/// One-second Hann segments with 50% overlap (or the whole trial if shorter).
pub fn class_psd(trials: &[&Trial]) -> Result<Vec<ClassPsd>> {
    let Some(first) = trials.first() else {
        bail!(BatchSize, "PSD needs at least one trial");
    };
    let seg = (first.sample_rate().round() as usize).min(first.n_t());
    let mut out = Vec::new();
    for class in 0..NUM_CLASSES {
        let mut acc: Option<ClassPsd> = None;
        let mut n = 0usize;
        for t in trials.iter().filter(|t| t.label() == class) {
            let p = welch_psd(t, seg)?;
            n += 1;
            match &mut acc {
                None => {
                    acc = Some(ClassPsd {
                        class,
                        frequencies: p.frequencies,
                        power: p.power,
                    })
                }
                Some(a) => {
                    for (ac, pc) in a.power.iter_mut().zip(&p.power) {
                        for (x, y) in ac.iter_mut().zip(pc) {
                            *x += y;
                        }
                    }
                }
            }
        }
        if let Some(mut a) = acc {
            for row in &mut a.power {
                for x in row.iter_mut() {
                    *x /= n as f64;
                }
            }
            out.push(a);
        }
    }
    Ok(out)
}

/// CSV `class,channel,frequency_hz,power`.
pub fn write_psd<W: Write>(w: W, psd: &[ClassPsd]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "channel", "frequency_hz", "power"])?;
    for p in psd {
        for (c, row) in p.power.iter().enumerate() {
            for (f, v) in p.frequencies.iter().zip(row) {
                out.write_record([p.class.to_string(), c.to_string(), f.to_string(), v.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
