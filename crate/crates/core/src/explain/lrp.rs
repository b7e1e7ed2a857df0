use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Mode, Padding, Tape, Tensor, Var};
use crate::error::{bail, Result};
use crate::model::{batch_tensor, run_layer, Block, Layer, Model, RunCtx};
use crate::signal::{Trial, NUM_CLASSES};

pub const DEFAULT_EPS: f64 = 1e-2;

/// Signed relevance of every input sample, row-major `[n_c × n_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub n_c: usize,
    pub n_t: usize,
    pub target: usize,
    pub values: Vec<f64>,
}

impl RelevanceMap {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.n_t..(c + 1) * self.n_t]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOp {
    Linear,
    Splitter,
    Dense,
    Pool,
}

/// Relevance entering and leaving one propagation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRelevance {
    pub name: String,
    pub op: StepOp,
    /// Total relevance at the step's output (the logit side).
    pub sum_out: f64,
    /// Total relevance redistributed to the step's input.
    pub sum_in: f64,
    /// Linear step with no bias and no folded normalization.
    pub bias_free: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrpTrace {
    pub map: RelevanceMap,
    pub logit: f64,
    /// Relevance of the class-relevant and class-irrelevant halves.
    pub f_re: Vec<f64>,
    pub f_ir: Vec<f64>,
    /// Linear and pooling steps in backward order, classifier first.
    pub steps: Vec<StepRelevance>,
}

enum Kind<'a> {
    /// Conv or depthwise conv, plus any batch norm folded in after it.
    Linear(Vec<&'a Layer>),
    /// The splitter `V`; its full output is `[f_re | f_ir]`.
    Splitter,
    Dense,
    /// Max-pool routes relevance to the selected input.
    Pool(&'a Layer),
    /// ELU, eval-mode dropout and flatten pass relevance through unchanged.
    Transparent(&'a Layer),
}

struct Step<'a> {
    name: String,
    kind: Kind<'a>,
}

fn stabilize(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

fn push_blocks<'a>(out: &mut Vec<Step<'a>>, blocks: &'a [Block]) {
    for b in blocks {
        for l in &b.layers {
            let kind = match l {
                Layer::BatchNorm { .. } => {
                    if let Some(Step {
                        kind: Kind::Linear(ls),
                        ..
                    }) = out.last_mut()
                    {
                        ls.push(l);
                        continue;
                    }
                    Kind::Linear(vec![l])
                }
                Layer::Conv { .. } | Layer::Depthwise { .. } => Kind::Linear(vec![l]),
                Layer::MaxPool { .. } => Kind::Pool(l),
                Layer::Elu | Layer::Dropout | Layer::Flatten => Kind::Transparent(l),
            };
            out.push(Step {
                name: b.name.clone(),
                kind,
            });
        }
    }
}

fn bias_free(kind: &Kind<'_>) -> bool {
    match kind {
        Kind::Linear(ls) => ls.iter().all(|l| match l {
            Layer::Conv { bias, .. } | Layer::Depthwise { bias, .. } => bias.is_none(),
            _ => false,
        }),
        Kind::Splitter => true,
        _ => false,
    }
}

/// ε-rule relevance propagation on an eval-mode, 64-bit copy of a model.
pub struct Lrp {
    model: Model<f64>,
    eps: f64,
    degenerate: bool,
}

impl Lrp {
    pub fn new(model: &Model<f32>, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            bail!(Config, "LRP eps must be positive, got {eps}");
        }
        let model = model.cast::<f64>();
        let degenerate = model
            .encoder_param_ids()
            .into_iter()
            .map(|id| model.store.get(id))
            .filter(|p| p.l2_coefficient > 0.0)
            .all(|p| p.tensor.data().iter().all(|&v| v == 0.0));
        if degenerate {
            warn!("every encoder weight is zero; relevance maps will be all zero");
        }
        Ok(Lrp {
            model,
            eps,
            degenerate,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn steps(&self) -> Vec<Step<'_>> {
        let arch = &self.model.arch;
        let mut out = Vec::new();
        push_blocks(&mut out, &arch.local);
        out.push(Step {
            name: "splitter".into(),
            kind: Kind::Splitter,
        });
        push_blocks(&mut out, &arch.global);
        out.push(Step {
            name: "classifier".into(),
            kind: Kind::Dense,
        });
        out
    }

    fn apply(&self, tape: &mut Tape<f64>, kind: &Kind<'_>, x: Var) -> Result<Var> {
        let m = &self.model;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = RunCtx::new(Mode::Eval, 0.0, &mut rng);
        match kind {
            Kind::Linear(ls) => {
                let mut y = x;
                for l in ls {
                    y = run_layer(tape, &m.store, l, y, &mut ctx)?;
                }
                Ok(y)
            }
            Kind::Splitter => {
                let v = tape.param(&m.store, m.arch.splitter);
                tape.conv2d(x, v, (1, 1), Padding::Valid)
            }
            Kind::Dense => m.classify(tape, x),
            Kind::Pool(l) | Kind::Transparent(l) => run_layer(tape, &m.store, l, x, &mut ctx),
        }
    }

    fn forward(&self, kind: &Kind<'_>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.apply(&mut tape, kind, xv)?;
        Ok(tape.value(y).clone())
    }

    /// `Jᵀ s` for the step's map at `x`: the transpose of the linear map for
    /// conv / dense steps, argmax routing for pooling.
    fn pullback(&self, kind: &Kind<'_>, x: &Tensor<f64>, s: Tensor<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let y = self.apply(&mut tape, kind, xv)?;
        let sv = tape.constant(s.reshape(tape.shape(y))?);
        let prod = tape.mul(y, sv)?;
        let loss = tape.sum(prod);
        let g = tape.backward(loss)?;
        Ok(g.get(xv).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
    }

    /// ε-rule through a linear map: `R_i = x_i Σ_j w_ij R_j / (z_j ± eps)`.
    fn linear_rule(
        &self,
        kind: &Kind<'_>,
        x: &Tensor<f64>,
        z: &Tensor<f64>,
        r: &[f64],
    ) -> Result<Vec<f64>> {
        let s: Vec<f64> = z
            .data()
            .iter()
            .zip(r)
            .map(|(&z, &r)| r / stabilize(z, self.eps))
            .collect();
        let c = self.pullback(kind, x, Tensor::new(z.shape().to_vec(), s)?)?;
        Ok(x.data().iter().zip(&c).map(|(x, c)| x * c).collect())
    }

    /// Relevance of every input sample for the `target` logit.
    pub fn trace(&self, trial: &Trial, target: usize) -> Result<LrpTrace> {
        if target >= NUM_CLASSES {
            bail!(Config, "target class {target} out of range");
        }
        let (n_c, n_t) = (trial.n_c(), trial.n_t());
        let x: Tensor<f64> = batch_tensor(&[trial])?.reshape(&[1, n_c, n_t, 1])?;
        let steps = self.steps();
        // Forward, keeping each step's input. The step after the splitter
        // sees only the f_re half.
        let mut inputs = Vec::with_capacity(steps.len() + 1);
        let mut a = x;
        let mut split_out = None;
        for st in &steps {
            let y = self.forward(&st.kind, &a)?;
            inputs.push(a);
            a = if matches!(st.kind, Kind::Splitter) {
                let d = *y.shape().last().unwrap();
                let mut tape = Tape::new();
                let yv = tape.constant(y.clone());
                let re = tape.slice_last(yv, 0, d / 2)?;
                split_out = Some(y);
                tape.value(re).clone()
            } else {
                y
            };
        }
        let logits = a;
        let logit = logits.data()[target];
        let mut r = vec![0.0; NUM_CLASSES];
        if !self.degenerate {
            r[target] = logit;
        }
        let (mut f_re, mut f_ir) = (Vec::new(), Vec::new());
        let mut records = Vec::new();
        for (k, st) in steps.iter().enumerate().rev() {
            let x = &inputs[k];
            let sum_out: f64 = r.iter().sum();
            let r_in = match &st.kind {
                Kind::Transparent(_) => r,
                Kind::Pool(_) => {
                    let shape = self.forward(&st.kind, x)?.shape().to_vec();
                    self.pullback(&st.kind, x, Tensor::new(shape, r)?)?
                }
                Kind::Splitter => {
                    let z = split_out.as_ref().expect("splitter ran forward");
                    let d = *z.shape().last().unwrap();
                    let half = d / 2;
                    let mut full = vec![0.0; z.len()];
                    for (i, v) in r.iter().enumerate() {
                        full[(i / half) * d + i % half] = *v;
                    }
                    f_re = r;
                    f_ir = (0..full.len())
                        .filter(|i| i % d >= half)
                        .map(|i| full[i])
                        .collect();
                    self.linear_rule(&st.kind, x, z, &full)?
                }
                kind => {
                    let z = self.forward(kind, x)?;
                    self.linear_rule(kind, x, &z, &r)?
                }
            };
            let op = match st.kind {
                Kind::Linear(_) => Some(StepOp::Linear),
                Kind::Splitter => Some(StepOp::Splitter),
                Kind::Dense => Some(StepOp::Dense),
                Kind::Pool(_) => Some(StepOp::Pool),
                Kind::Transparent(_) => None,
            };
            if let Some(op) = op {
                records.push(StepRelevance {
                    name: st.name.clone(),
                    op,
                    sum_out,
                    sum_in: r_in.iter().sum(),
                    bias_free: bias_free(&st.kind),
                });
            }
            r = r_in;
        }
        if r.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite relevance");
        }
        Ok(LrpTrace {
            map: RelevanceMap {
                n_c,
                n_t,
                target,
                values: r,
            },
            logit,
            f_re,
            f_ir,
            steps: records,
        })
    }

    pub fn explain(&self, trial: &Trial, target: usize) -> Result<RelevanceMap> {
        Ok(self.trace(trial, target)?.map)
    }
}

/// One-shot ε-rule LRP of `trial` for the `target` logit.
pub fn lrp_epsilon(model: &Model<f32>, trial: &Trial, target: usize, eps: f64) -> Result<RelevanceMap> {
    Lrp::new(model, eps)?.explain(trial, target)
}
