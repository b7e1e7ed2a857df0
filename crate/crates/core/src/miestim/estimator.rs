use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dv_mi_estimate, js_mi_objective, PairBatch, PairScorer};
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::model::Builder;
use crate::training::RAdam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveForm {
    Js,
    Dv,
}

/// A free-standing pair scorer trained on paired samples `(a_i, b_i)`.
/// Used for calibration against known mutual information.
#[derive(Clone, Debug)]
pub struct MiEstimator {
    pub form: ObjectiveForm,
    pub store: ParamStore<f64>,
    pub scorer: PairScorer,
    dim_a: usize,
    dim_b: usize,
}

/// Row-major `[n, dim]` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples<'a> {
    pub data: &'a [f64],
    pub dim: usize,
}

impl Samples<'_> {
    fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    fn rows(&self, idx: &[usize]) -> Tensor<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            out.extend_from_slice(&self.data[i * self.dim..(i + 1) * self.dim]);
        }
        Tensor::new(vec![idx.len(), self.dim], out).expect("row gather keeps shape")
    }
}

impl MiEstimator {
    pub fn new(
        dim_a: usize,
        dim_b: usize,
        hidden: &[usize],
        form: ObjectiveForm,
        seed: u64,
    ) -> Result<Self> {
        if dim_a == 0 || dim_b == 0 {
            bail!(Config, "estimator input dims must be positive");
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            l2: 0.0,
        };
        let scorer = PairScorer::build(&mut b, "estimator", dim_a + dim_b, hidden)?;
        Ok(MiEstimator {
            form,
            store,
            scorer,
            dim_a,
            dim_b,
        })
    }

    /// Objective on one batch; marginals are a derangement of `b`.
    pub fn objective<R: rand::Rng + ?Sized>(
        &self,
        tape: &mut Tape<f64>,
        a: Var,
        b: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let pairs = PairBatch::new(tape, a, b, rng)?;
        let joint = self.scorer.score(tape, &self.store, pairs.a, pairs.b_joint)?;
        let marginal = self
            .scorer
            .score(tape, &self.store, pairs.a, pairs.b_marginal)?;
        match self.form {
            ObjectiveForm::Js => js_mi_objective(tape, joint, marginal),
            ObjectiveForm::Dv => dv_mi_estimate(tape, joint, marginal),
        }
    }

    fn check(&self, a: &Samples, b: &Samples) -> Result<usize> {
        if a.dim != self.dim_a || b.dim != self.dim_b {
            bail!(
                Dimension,
                "estimator expects dims ({}, {}), got ({}, {})",
                self.dim_a,
                self.dim_b,
                a.dim,
                b.dim
            );
        }
        let n = a.len();
        if b.len() != n || a.data.len() % a.dim != 0 || b.data.len() % b.dim != 0 {
            bail!(Dimension, "paired samples differ in count");
        }
        if n < 2 {
            bail!(BatchSize, "need at least 2 paired samples, got {n}");
        }
        Ok(n)
    }

    /// Gradient ascent on the objective over random minibatches. Returns the
    /// per-step objective values.
    pub fn fit(
        &mut self,
        a: &Samples,
        b: &Samples,
        steps: usize,
        batch: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let n = self.check(a, b)?;
        let batch = batch.min(n);
        if batch < 2 {
            bail!(BatchSize, "minibatch size must be >= 2");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = RAdam::new(&self.store);
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx = sample(&mut rng, n, batch).into_vec();
            let mut tape = Tape::new();
            let va = tape.constant(a.rows(&idx));
            let vb = tape.constant(b.rows(&idx));
            let obj = self.objective(&mut tape, va, vb, &mut rng)?;
            let value = tape.value(obj).item();
            if !value.is_finite() {
                bail!(Numeric, "estimator objective diverged to {value}");
            }
            trace.push(value);
            let loss = tape.neg(obj);
            let grads = tape.backward(loss)?;
            let pg = tape.param_grads(&grads, self.store.len());
            opt.step(&mut self.store, &pg, lr)?;
        }
        Ok(trace)
    }

    /// Objective over all given pairs, with one shuffled marginal draw.
    pub fn evaluate(&self, a: &Samples, b: &Samples, seed: u64) -> Result<f64> {
        let n = self.check(a, b)?;
        let idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let va = tape.constant(a.rows(&idx));
        let vb = tape.constant(b.rows(&idx));
        let obj = self.objective(&mut tape, va, vb, &mut rng)?;
        Ok(tape.value(obj).item())
    }
}
