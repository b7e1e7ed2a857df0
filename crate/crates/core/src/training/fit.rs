use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::objective::compute_objective;
use super::optimizer::RAdam;
use crate::diffcore::{Scalar, Tape};
use crate::error::{bail, Error, Result};
use crate::model::{batch_tensor, Model};
use crate::signal::Trial;

/// Epoch-wise shuffle of `0..n` cut into batches; a final batch smaller
/// than 2 is dropped.
pub fn make_minibatches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        bail!(BatchSize, "cannot batch an empty trial set");
    }
    if batch_size < 2 {
        bail!(BatchSize, "batch size must be at least 2, got {batch_size}");
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Ok(idx
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Mean losses of one epoch (loss form: MI terms are negated objectives).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_dec: f64,
    pub l_local: f64,
    pub l_global: f64,
    pub total: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Total objective of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

pub const HISTORY_HEADER: [&str; 8] = [
    "epoch", "L_cls", "L_dec", "L_local", "L_global", "total", "val_acc", "lr",
];

pub fn write_history<W: Write>(w: W, history: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(HISTORY_HEADER)?;
    for r in history {
        out.write_record([
            r.epoch.to_string(),
            r.l_cls.to_string(),
            r.l_dec.to_string(),
            r.l_local.to_string(),
            r.l_global.to_string(),
            r.total.to_string(),
            r.val_acc.to_string(),
            r.lr.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

const EVAL_CHUNK: usize = 128;

/// Eval-mode mean cross-entropy and accuracy.
pub fn evaluate(model: &Model<f32>, trials: &[&Trial]) -> Result<(f64, f64)> {
    if trials.is_empty() {
        bail!(BatchSize, "cannot evaluate on an empty set");
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in trials.chunks(EVAL_CHUNK) {
        let probs = model.predict_proba(batch_tensor(chunk)?)?;
        for (p, t) in probs.iter().zip(chunk) {
            let y = t.label();
            loss -= (p[y] as f64).max(1e-300).ln();
            let pred = usize::from(p[1] > p[0]);
            correct += usize::from(pred == y);
        }
    }
    let n = trials.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

pub fn predict(model: &Model<f32>, trials: &[&Trial]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(trials.len());
    for chunk in trials.chunks(EVAL_CHUNK) {
        out.extend(
            model
                .predict_proba(batch_tensor(chunk)?)?
                .iter()
                .map(|p| usize::from(p[1] > p[0])),
        );
    }
    Ok(out)
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

fn tag_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

/// Joint end-to-end training of every component with one optimizer;
/// early stopping on validation loss.
pub fn fit(
    mut model: Model<f32>,
    train: &[&Trial],
    val: &[&Trial],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        bail!(
            BatchSize,
            "training needs >= 2 training trials and a non-empty validation set"
        );
    }
    let train_ptrs: HashSet<*const Trial> = train.iter().map(|t| *t as *const Trial).collect();
    if val
        .iter()
        .any(|t| train_ptrs.contains(&(*t as *const Trial)))
    {
        bail!(Protocol, "training and validation sets overlap");
    }
    let mut order_rng = stream(cfg.seed, 1);
    let mut dropout_rng = stream(cfg.seed, 2);
    let mut shuffle_rng = stream(cfg.seed, 3);
    let mut opt = RAdam::new(&model.store);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let batches = make_minibatches(train.len(), cfg.batch_size, &mut order_rng)?;
        let mut sums = [0.0f64; 5];
        for idx in &batches {
            let trials: Vec<&Trial> = idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = trials.iter().map(|t| t.label()).collect();
            let mut tape = Tape::new();
            let terms = compute_objective(
                &mut tape,
                &model,
                batch_tensor(&trials)?,
                &labels,
                cfg,
                &mut dropout_rng,
                &mut shuffle_rng,
            )?;
            let total = tape.value(terms.total).item().as_f64();
            if !total.is_finite() {
                bail!(Numeric, "epoch {epoch}: training loss diverged ({total})");
            }
            let item =
                |v: Option<crate::diffcore::Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
            let vals = [
                item(Some(terms.cls)),
                item(terms.dec),
                item(terms.local),
                item(terms.global),
                total,
            ];
            sums.iter_mut().zip(vals).for_each(|(s, v)| *s += v);
            step_losses.push(total);
            let grads = tape.backward(terms.total)?;
            let pg = tape.param_grads(&grads, model.store.len());
            opt.step(&mut model.store, &pg, lr)
                .map_err(|e| tag_epoch(e, epoch))?;
            model.apply_bn_updates(&terms.bn_updates);
        }
        let nb = batches.len().max(1) as f64;
        let (val_loss, val_acc) = evaluate(&model, val)?;
        if !val_loss.is_finite() {
            bail!(
                Numeric,
                "epoch {epoch}: validation loss diverged ({val_loss})"
            );
        }
        history.push(EpochRecord {
            epoch,
            l_cls: sums[0] / nb,
            l_dec: sums[1] / nb,
            l_local: sums[2] / nb,
            l_global: sums[3] / nb,
            total: sums[4] / nb,
            val_loss,
            val_acc,
            lr,
        });
        log::debug!(
            "epoch {epoch}: total {:.4} val_loss {val_loss:.4} val_acc {val_acc:.3}",
            sums[4] / nb
        );
        match &best {
            Some((b, _, _)) if val_loss >= *b => {}
            _ => best = Some((val_loss, epoch, model.clone())),
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(FitResult {
        model,
        best_epoch,
        history,
        step_losses,
    })
}
