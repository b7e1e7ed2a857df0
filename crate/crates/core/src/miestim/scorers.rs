use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mode, Padding, ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::{bail, Result};
use crate::model::{
    blocks_shape, global_blocks, run_blocks, Block, Builder, FeatureDims, ModelConfig, RunCtx,
    ELU_ALPHA,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    /// Width of both hidden dense layers of `M`.
    pub decomposition_hidden: usize,
    /// Hidden 1x1-conv width of `T_l`.
    pub local_hidden: usize,
    /// Hidden dense width of `T_g`.
    pub global_hidden: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            decomposition_hidden: 256,
            local_hidden: 64,
            global_hidden: 64,
        }
    }
}

/// Dense ELU stack on `concat(flatten(a), flatten(b))`, one score per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScorer {
    pub layers: Vec<(ParamId, ParamId)>,
    pub in_dim: usize,
}

impl PairScorer {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut i = in_dim;
        for (k, &h) in hidden.iter().enumerate() {
            layers.push(b.dense(&format!("{name}.dense{k}"), i, h)?);
            i = h;
        }
        layers.push(b.dense(&format!("{name}.out"), i, 1)?);
        Ok(PairScorer { layers, in_dim })
    }

    /// Scores `[B, 1]`.
    pub fn score<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        a: Var,
        b: Var,
    ) -> Result<Var> {
        let (a, b) = (tape.flatten(a)?, tape.flatten(b)?);
        let mut h = tape.concat_last(&[a, b])?;
        if tape.shape(h)[1] != self.in_dim {
            bail!(
                Dimension,
                "pair scorer expects {} input features, got {}",
                self.in_dim,
                tape.shape(h)[1]
            );
        }
        for (k, &(w, bias)) in self.layers.iter().enumerate() {
            let (w, bias) = (tape.param(store, w), tape.param(store, bias));
            h = tape.dense(h, w, bias)?;
            if k + 1 < self.layers.len() {
                h = tape.elu(h, ELU_ALPHA);
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Concat-and-convolve scorer: `f_g` replicated over every patch of `f_re`,
/// depth-concatenated, then 1x1 conv, ELU, 1x1 conv to one score per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalScorer {
    pub hidden: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
}

impl LocalScorer {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        d1: usize,
        d_g: usize,
        hidden: usize,
    ) -> Result<Self> {
        let conv = |b: &mut Builder<'_, T, R>, n: &str, i, o| -> Result<(ParamId, ParamId)> {
            match b.conv(&format!("{name}.{n}"), [1, 1, i, o], true)? {
                crate::model::Layer::Conv {
                    kernel,
                    bias: Some(bias),
                    ..
                } => Ok((kernel, bias)),
                _ => unreachable!(),
            }
        };
        Ok(LocalScorer {
            hidden: conv(b, "hidden", d1 + d_g, hidden)?,
            out: conv(b, "out", hidden, 1)?,
        })
    }

    /// Scores `[B, h1, w1, 1]`.
    pub fn score<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_g: Var,
        f_re: Var,
    ) -> Result<Var> {
        let s = tape.shape(f_re).to_vec();
        if s.len() != 4 {
            bail!(Dimension, "local scorer expects a 4-D f_re, got {s:?}");
        }
        let g = tape.broadcast_spatial(f_g, s[1], s[2])?;
        let mut h = tape.concat_last(&[f_re, g])?;
        for (k, &(w, b)) in [self.hidden, self.out].iter().enumerate() {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            h = tape.conv2d(h, w, (1, 1), Padding::Valid)?;
            h = tape.add_bias(h, b)?;
            if k == 0 {
                h = tape.elu(h, ELU_ALPHA);
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.hidden.0, self.hidden.1, self.out.0, self.out.1]
    }
}

/// `f_re` embedded by a copy of the global encoder's layer stack (own
/// weights, biases instead of batch norm, no dropout), flattened,
/// concatenated with `f_g`, then dense, ELU, dense to one score.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalScorer {
    pub embed: Vec<Block>,
    pub head: PairScorer,
}

impl GlobalScorer {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        config: &ModelConfig,
        dims: FeatureDims,
    ) -> Result<Self> {
        let embed = global_blocks(b, &config.encoder, &format!("{name}.embed"), true)?;
        let e = blocks_shape(&embed, &[1, dims.h1, dims.w1, dims.d1])?[1];
        let head = PairScorer::build(
            b,
            &format!("{name}.head"),
            e + dims.d_g,
            &[config.scorers.global_hidden],
        )?;
        Ok(GlobalScorer { embed, head })
    }

    /// Scores `[B, 1]`.
    pub fn score<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_g: Var,
        f_re: Var,
    ) -> Result<Var> {
        // The embedder has no dropout or batch norm, so mode and rng are inert.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut ctx = RunCtx::new(Mode::Eval, 0.0, &mut rng);
        let e = run_blocks(tape, store, &self.embed, f_re, &mut ctx)?;
        self.head.score(tape, store, e, f_g)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .embed
            .iter()
            .flat_map(|b| &b.layers)
            .flat_map(|l| match *l {
                crate::model::Layer::Conv { kernel, bias, .. }
                | crate::model::Layer::Depthwise { kernel, bias, .. } => {
                    std::iter::once(kernel).chain(bias).collect::<Vec<_>>()
                }
                _ => Vec::new(),
            })
            .collect();
        ids.extend(self.head.param_ids());
        ids
    }
}

/// `M` (decomposition), `T_l` (local) and `T_g` (global).
#[derive(Clone, Debug, PartialEq)]
pub struct Scorers {
    pub decomposition: PairScorer,
    pub local: LocalScorer,
    pub global: GlobalScorer,
}

impl Scorers {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        b: &mut Builder<'_, T, R>,
        config: &ModelConfig,
        dims: FeatureDims,
    ) -> Result<Self> {
        let sc = &config.scorers;
        if sc.decomposition_hidden == 0 || sc.local_hidden == 0 || sc.global_hidden == 0 {
            bail!(Config, "scorer hidden widths must be positive");
        }
        let h = sc.decomposition_hidden;
        Ok(Scorers {
            decomposition: PairScorer::build(b, "mi.decomposition", 2 * dims.local_len(), &[h, h])?,
            local: LocalScorer::build(b, "mi.local", dims.d1, dims.d_g, sc.local_hidden)?,
            global: GlobalScorer::build(b, "mi.global", config, dims)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.decomposition.param_ids();
        ids.extend(self.local.param_ids());
        ids.extend(self.global.param_ids());
        ids
    }
}
