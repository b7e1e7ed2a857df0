use rand::Rng;

use super::config::{LossWeights, TrainConfig};
use crate::diffcore::{Mode, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;
use crate::miestim;
use crate::model::{BnUpdate, Features, Model, RunCtx};

/// Tape handles of every term of one training step. Inactive terms are
/// `None` and were never computed.
#[derive(Clone, Debug)]
pub struct LossTerms<T> {
    pub cls: Var,
    pub dec: Option<Var>,
    pub local: Option<Var>,
    pub global: Option<Var>,
    pub l2: Option<Var>,
    pub total: Var,
    pub features: Features,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// `alpha * cls + beta * dec + gamma * dim (+ l2)`; absent terms contribute 0.
pub fn total_objective<T: Scalar>(
    tape: &mut Tape<T>,
    cls: Var,
    dec: Option<Var>,
    dim: Option<Var>,
    w: &LossWeights,
    l2: Option<Var>,
) -> Result<Var> {
    w.validate()?;
    let mut total = tape.scale(cls, w.alpha);
    for (term, c) in [(dec, w.beta), (dim, w.gamma)] {
        if let Some(v) = term {
            let s = tape.scale(v, c);
            total = tape.add(total, s)?;
        }
    }
    if let Some(l2) = l2 {
        total = tape.add(total, l2)?;
    }
    Ok(total)
}

/// `l2 * sum ||W||^2` over weight tensors already on the tape.
pub fn l2_penalty<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    l2: f64,
) -> Result<Option<Var>> {
    if l2 == 0.0 {
        return Ok(None);
    }
    let mut acc: Option<Var> = None;
    for (i, p) in store.params().iter().enumerate() {
        if p.l2_coefficient == 0.0 {
            continue;
        }
        let Some(v) = tape.param_var(ParamId(i)) else {
            continue;
        };
        let sq = tape.sum_squares(v);
        let term = tape.scale(sq, l2 * p.l2_coefficient);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc)
}

/// Forward pass plus every active loss term for one batch.
pub fn compute_objective<T: Scalar, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    x: Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    dropout_rng: &mut R1,
    shuffle_rng: &mut R2,
) -> Result<LossTerms<T>> {
    let w = &cfg.weights;
    let x = model.input(tape, x)?;
    let mut ctx = RunCtx::new(Mode::Train, model.config.encoder.dropout_rate, dropout_rng);
    let f = model.forward(tape, x, &mut ctx)?;
    let cls = tape.softmax_cross_entropy(f.logits, labels)?;
    let dec = if w.beta > 0.0 {
        Some(miestim::decomposition_loss(
            tape,
            model,
            f.f_re,
            f.f_ir,
            shuffle_rng,
        )?)
    } else {
        None
    };
    let (mut local, mut global) = (None, None);
    if w.gamma > 0.0 {
        if cfg.variant.local_active() {
            let o = miestim::local_mi_objective(tape, model, f.f_g, f.f_re, shuffle_rng)?;
            local = Some(miestim::as_loss(tape, o));
        }
        if cfg.variant.global_active() {
            let o = miestim::global_mi_objective(tape, model, f.f_g, f.f_re, shuffle_rng)?;
            global = Some(miestim::as_loss(tape, o));
        }
    }
    let dim = match (local, global) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (a, b) => a.or(b),
    };
    let l2 = l2_penalty(tape, &model.store, cfg.l2)?;
    let total = total_objective(tape, cls, dec, dim, w, l2)?;
    Ok(LossTerms {
        cls,
        dec,
        local,
        global,
        l2,
        total,
        features: f,
        bn_updates: ctx.bn_updates,
    })
}
