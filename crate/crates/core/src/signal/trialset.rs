//! "TRIALSET v1": one JSON header line, then per trial the row-major LE f32
//! samples, a class byte and an LE u16 subject id.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trial::NUM_CLASSES;
use super::Trial;
use crate::error::{bail, Result};

pub const VERSION: &str = "TRIALSET v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: String,
    pub n_trials: usize,
    pub n_c: usize,
    pub n_t: usize,
    pub sample_rate: f64,
    pub class_names: Vec<String>,
    pub subject_ids: Vec<u16>,
}

pub fn default_class_names() -> Vec<String> {
    vec!["left".into(), "right".into()]
}

pub fn write_trials<W: Write>(mut w: W, trials: &[Trial], class_names: &[String]) -> Result<()> {
    let Some(first) = trials.first() else {
        bail!(Format, "cannot write an empty trial set");
    };
    if class_names.len() != NUM_CLASSES {
        bail!(
            Format,
            "expected {NUM_CLASSES} class names, got {}",
            class_names.len()
        );
    }
    let (n_c, n_t, fs) = (first.n_c(), first.n_t(), first.sample_rate());
    if let Some(t) = trials
        .iter()
        .find(|t| t.n_c() != n_c || t.n_t() != n_t || t.sample_rate() != fs)
    {
        bail!(
            Format,
            "trial shapes differ: {n_c}x{n_t} @ {fs} Hz vs {}x{} @ {} Hz",
            t.n_c(),
            t.n_t(),
            t.sample_rate()
        );
    }
    let subject_ids: BTreeSet<u16> = trials.iter().map(Trial::subject).collect();
    let header = Header {
        version: VERSION.into(),
        n_trials: trials.len(),
        n_c,
        n_t,
        sample_rate: fs,
        class_names: class_names.to_vec(),
        subject_ids: subject_ids.into_iter().collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(4 * n_c * n_t + 3);
    for t in trials {
        buf.clear();
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(t.label() as u8);
        buf.extend_from_slice(&t.subject().to_le_bytes());
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials<R: Read>(r: R) -> Result<(Header, Vec<Trial>)> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        bail!(Format, "missing header line terminator");
    }
    let header: Header = serde_json::from_slice(&line)?;
    if header.version != VERSION {
        bail!(Format, "unsupported trial-set version {:?}", header.version);
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let record = 4 * header.n_c * header.n_t + 3;
    if payload.len() != header.n_trials * record {
        bail!(
            Format,
            "payload holds {} bytes, header implies {} trials x {record} bytes",
            payload.len(),
            header.n_trials
        );
    }
    let known: BTreeSet<u16> = header.subject_ids.iter().copied().collect();
    let n = header.n_c * header.n_t;
    let mut trials = Vec::with_capacity(header.n_trials);
    for (i, rec) in payload.chunks_exact(record).enumerate() {
        let x = rec[..4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let label = rec[4 * n] as usize;
        if label >= header.class_names.len() {
            bail!(
                Format,
                "trial {i} has class index {label} but only {} class names",
                header.class_names.len()
            );
        }
        let subject = u16::from_le_bytes([rec[4 * n + 1], rec[4 * n + 2]]);
        if !known.contains(&subject) {
            bail!(
                Format,
                "trial {i} has subject {subject}, absent from the header"
            );
        }
        trials.push(Trial::new(
            x,
            header.n_c,
            header.n_t,
            label,
            subject,
            header.sample_rate,
        )?);
    }
    Ok((header, trials))
}

pub fn save(path: &Path, trials: &[Trial], class_names: &[String]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_trials(std::io::BufWriter::new(f), trials, class_names)
}

pub fn load(path: &Path) -> Result<(Header, Vec<Trial>)> {
    read_trials(std::fs::File::open(path)?)
}
