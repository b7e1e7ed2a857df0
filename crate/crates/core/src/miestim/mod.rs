//! Mutual-information estimators: the JS objective used for training, the
//! DV estimate used for calibration, batch-shuffled marginals, and the
//! decomposition / local / global losses built on the three scorers.

mod estimator;
mod scorers;


use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffcore::{Scalar, Tape, Var};
use crate::error::{bail, Result};
use crate::model::Model;

pub use estimator::{MiEstimator, ObjectiveForm, Samples};
pub use scorers::{GlobalScorer, LocalScorer, PairScorer, ScorerConfig, Scorers};

/// A uniformly random permutation of `0..n` with no fixed point, drawn by
/// rejection.
pub fn shuffle_marginals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        bail!(
            BatchSize,
            "marginal shuffling needs batch size >= 2, got {n}"
        );
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Joint pairs `(a_i, b_i)` and marginal pairs `(a_i, b_perm[i])`.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub a: Var,
    pub b_joint: Var,
    pub b_marginal: Var,
    pub perm: Vec<usize>,
}

impl PairBatch {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        tape: &mut Tape<T>,
        a: Var,
        b: Var,
        rng: &mut R,
    ) -> Result<Self> {
        let n = tape.shape(a)[0];
        if tape.shape(b)[0] != n {
            bail!(
                Dimension,
                "pair batch sizes differ: {n} vs {}",
                tape.shape(b)[0]
            );
        }
        let perm = shuffle_marginals(n, rng)?;
        let b_marginal = tape.gather_rows(b, &perm)?;
        Ok(PairBatch {
            a,
            b_joint: b,
            b_marginal,
            perm,
        })
    }
}

fn check_nonempty<T: Scalar>(tape: &Tape<T>, joint: Var, marginal: Var) -> Result<()> {
    if tape.value(joint).is_empty() || tape.value(marginal).is_empty() {
        bail!(BatchSize, "empty pair batch");
    }
    Ok(())
}

/// `E_J[-sp(-T)] - E_M[sp(T)]` over the given joint and marginal scores.
pub fn js_mi_objective<T: Scalar>(tape: &mut Tape<T>, joint: Var, marginal: Var) -> Result<Var> {
    check_nonempty(tape, joint, marginal)?;
    let nj = tape.neg(joint);
    let spj = tape.softplus(nj);
    let ej = tape.mean(spj);
    let spm = tape.softplus(marginal);
    let em = tape.mean(spm);
    let s = tape.add(ej, em)?;
    Ok(tape.neg(s))
}

/// `mean_J(T) - log(mean_M(exp T))`, with a max-shifted log-mean-exp.
pub fn dv_mi_estimate<T: Scalar>(tape: &mut Tape<T>, joint: Var, marginal: Var) -> Result<Var> {
    check_nonempty(tape, joint, marginal)?;
    let mj = tape.mean(joint);
    let lme = tape.log_mean_exp(marginal);
    tape.sub(mj, lme)
}

/// JS objective of `M` on `(f_re, f_ir)` with both inputs passed through
/// gradient reversal, so `M` ascends the objective and whatever produced
/// the features descends it.
pub fn decomposition_objective<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    f_re: Var,
    f_ir: Var,
    rng: &mut R,
) -> Result<Var> {
    if tape.shape(f_re) != tape.shape(f_ir) {
        bail!(
            Dimension,
            "f_re {:?} and f_ir {:?} differ in shape",
            tape.shape(f_re),
            tape.shape(f_ir)
        );
    }
    let re = tape.gradient_reversal(f_re);
    let ir = tape.gradient_reversal(f_ir);
    let pairs = PairBatch::new(tape, re, ir, rng)?;
    let m = &model.arch.scorers.decomposition;
    let joint = m.score(tape, &model.store, pairs.a, pairs.b_joint)?;
    let marginal = m.score(tape, &model.store, pairs.a, pairs.b_marginal)?;
    js_mi_objective(tape, joint, marginal)
}

/// Decomposition loss minimized by the training loop: the negated,
/// reversal-wrapped JS objective.
pub fn decomposition_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    f_re: Var,
    f_ir: Var,
    rng: &mut R,
) -> Result<Var> {
    let obj = decomposition_objective(tape, model, f_re, f_ir, rng)?;
    Ok(tape.neg(obj))
}

/// Local DIM objective: JS over per-patch scores of `T_l`, marginals from
/// batch-shuffled `f_g`, averaged over batch and patches.
pub fn local_mi_objective<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    f_g: Var,
    f_re: Var,
    rng: &mut R,
) -> Result<Var> {
    let pairs = PairBatch::new(tape, f_re, f_g, rng)?;
    let t = &model.arch.scorers.local;
    let joint = t.score(tape, &model.store, pairs.b_joint, pairs.a)?;
    let marginal = t.score(tape, &model.store, pairs.b_marginal, pairs.a)?;
    js_mi_objective(tape, joint, marginal)
}

/// Global DIM objective: JS over `T_g` scores, marginals from
/// batch-shuffled `f_g`.
pub fn global_mi_objective<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    f_g: Var,
    f_re: Var,
    rng: &mut R,
) -> Result<Var> {
    let pairs = PairBatch::new(tape, f_re, f_g, rng)?;
    let t = &model.arch.scorers.global;
    let joint = t.score(tape, &model.store, pairs.b_joint, pairs.a)?;
    let marginal = t.score(tape, &model.store, pairs.b_marginal, pairs.a)?;
    js_mi_objective(tape, joint, marginal)
}

/// `-objective`, for the DIM terms the training loop minimizes.
pub fn as_loss<T: Scalar>(tape: &mut Tape<T>, objective: Var) -> Var {
    tape.neg(objective)
}
