use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Backbone, EncoderConfig, DEEPCONV_KERNEL, DEEPCONV_POOL};
use super::layers::{blocks_shape, run_blocks, Block, BnUpdate, Builder, Layer, RunCtx};
use crate::diffcore::{Mode, Padding, ParamId, ParamStore, Scalar, Tape, Tensor, Var, BN_MOMENTUM};
use crate::error::{bail, Result};
use crate::miestim::{ScorerConfig, Scorers};
use crate::signal::Trial;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub scorers: ScorerConfig,
}

/// Shapes of the intermediate features for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub h1: usize,
    pub w1: usize,
    pub d1: usize,
    pub d_g: usize,
}

impl FeatureDims {
    pub fn local_len(&self) -> usize {
        self.h1 * self.w1 * self.d1
    }
}

/// Parameter handles and layer lists; independent of the scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub local: Vec<Block>,
    /// 1x1 convolution `d1 -> 2 d1`, no bias.
    pub splitter: ParamId,
    pub global: Vec<Block>,
    pub classifier: (ParamId, ParamId),
    pub scorers: Scorers,
    pub dims: FeatureDims,
}

/// Encoder stack `E_l -> V -> E_g -> C` plus the three MI scorers, all in
/// one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub arch: Architecture,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub f_l: Var,
    pub f_re: Var,
    pub f_ir: Var,
    pub f_g: Var,
    pub logits: Var,
}

/// Feature values for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    pub f_l: Tensor<T>,
    pub f_re: Tensor<T>,
    pub f_ir: Tensor<T>,
    pub f_g: Tensor<T>,
}

fn deepconvnet_local<T: Scalar, R: Rng + ?Sized>(
    b: &mut Builder<'_, T, R>,
    cfg: &EncoderConfig,
) -> Result<Vec<Block>> {
    let d = cfg.base_depth;
    let k = DEEPCONV_KERNEL;
    let mut blocks = vec![Block {
        name: "deepconvnet block 1".into(),
        layers: vec![
            b.conv("el.block1.temporal", [1, k, 1, d], false)?,
            b.conv("el.block1.spatial", [cfg.n_c, 1, d, d], false)?,
            b.batch_norm("el.block1.bn", d)?,
            Layer::Elu,
        ],
    }];
    for (i, (din, dout)) in [(d, d), (d, 2 * d)].into_iter().enumerate() {
        let n = i + 2;
        blocks.push(Block {
            name: format!("deepconvnet block {n}"),
            layers: vec![
                Layer::Dropout,
                b.conv(&format!("el.block{n}.conv"), [1, k, din, dout], false)?,
                b.batch_norm(&format!("el.block{n}.bn"), dout)?,
                Layer::Elu,
                Layer::MaxPool {
                    width: DEEPCONV_POOL,
                },
            ],
        });
    }
    Ok(blocks)
}

/// The global encoder, or (for `scorer_embedder`) the same layer stack with
/// biases instead of batch norm and no dropout.
pub fn global_blocks<T: Scalar, R: Rng + ?Sized>(
    b: &mut Builder<'_, T, R>,
    cfg: &EncoderConfig,
    prefix: &str,
    scorer_embedder: bool,
) -> Result<Vec<Block>> {
    let bn = !scorer_embedder;
    let mut layers = Vec::new();
    match cfg.backbone {
        Backbone::DeepConvNet => {
            let d = cfg.base_depth;
            if bn {
                layers.push(Layer::Dropout);
            }
            layers.push(b.conv(
                &format!("{prefix}.conv"),
                [1, DEEPCONV_KERNEL, 2 * d, 4 * d],
                !bn,
            )?);
            if bn {
                layers.push(b.batch_norm(&format!("{prefix}.bn"), 4 * d)?);
            }
            layers.extend([
                Layer::Elu,
                Layer::MaxPool {
                    width: DEEPCONV_POOL,
                },
            ]);
        }
        Backbone::EegNet => {
            let d1 = cfg.base_depth * cfg.depth_multiplier;
            layers.push(b.depthwise(
                &format!("{prefix}.separable.depthwise"),
                [1, cfg.eegnet_separable_len(), d1, 1],
                false,
            )?);
            layers.push(b.conv(
                &format!("{prefix}.separable.pointwise"),
                [1, 1, d1, d1],
                !bn,
            )?);
            if bn {
                layers.push(b.batch_norm(&format!("{prefix}.bn"), d1)?);
            }
            layers.extend([Layer::Elu, Layer::MaxPool { width: cfg.pools.1 }]);
            if bn {
                layers.push(Layer::Dropout);
            }
        }
    }
    layers.push(Layer::Flatten);
    let name = match cfg.backbone {
        Backbone::DeepConvNet => "deepconvnet block 4",
        Backbone::EegNet => "eegnet layer 3",
    };
    let name = if scorer_embedder {
        format!("{name} (global scorer embedder)")
    } else {
        name.to_string()
    };
    Ok(vec![Block { name, layers }])
}

fn eegnet_local<T: Scalar, R: Rng + ?Sized>(
    b: &mut Builder<'_, T, R>,
    cfg: &EncoderConfig,
) -> Result<Vec<Block>> {
    let f1 = cfg.base_depth;
    let m = cfg.depth_multiplier;
    Ok(vec![
        Block {
            name: "eegnet layer 1".into(),
            layers: vec![
                b.conv(
                    "el.layer1.temporal",
                    [1, cfg.eegnet_temporal_len(), 1, f1],
                    false,
                )?,
                b.batch_norm("el.layer1.bn", f1)?,
            ],
        },
        Block {
            name: "eegnet layer 2".into(),
            layers: vec![
                b.depthwise("el.layer2.spatial", [cfg.n_c, 1, f1, m], false)?,
                b.batch_norm("el.layer2.bn", f1 * m)?,
                Layer::Elu,
                Layer::MaxPool { width: cfg.pools.0 },
                Layer::Dropout,
            ],
        },
    ])
}

impl<T: Scalar> Model<T> {
    /// Build every component with Glorot-uniform weights drawn from `seed`.
    /// The scorers are always built, so all loss variants share one
    /// initialization of the encoder for a given seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let cfg = &config.encoder;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            l2: 1.0,
        };
        let local = match cfg.backbone {
            Backbone::DeepConvNet => deepconvnet_local(&mut b, cfg)?,
            Backbone::EegNet => eegnet_local(&mut b, cfg)?,
        };
        let f_l = blocks_shape(&local, &[1, cfg.n_c, cfg.n_t, 1])?;
        let (h1, w1, d1) = (f_l[1], f_l[2], f_l[3]);
        let Layer::Conv {
            kernel: splitter, ..
        } = b.conv("v.pointwise", [1, 1, d1, 2 * d1], false)?
        else {
            unreachable!()
        };
        let global = global_blocks(&mut b, cfg, "eg", false)?;
        let d_g = blocks_shape(&global, &f_l)?[1];
        if d_g < 2 {
            bail!(Dimension, "global feature has {d_g} units, need at least 2");
        }
        let classifier = b.dense("c.dense", d_g, 2)?;
        let dims = FeatureDims { h1, w1, d1, d_g };
        // Estimator networks are not weight-decayed.
        b.l2 = 0.0;
        let scorers = Scorers::build(&mut b, &config, dims)?;
        let arch = Architecture {
            local,
            splitter,
            global,
            classifier,
            scorers,
            dims,
        };
        Ok(Model {
            config,
            store,
            arch,
        })
    }

    pub fn dims(&self) -> FeatureDims {
        self.arch.dims
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            arch: self.arch.clone(),
        }
    }

    /// Parameter ids belonging to the encoder stack `E_l, V, E_g, C`.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        let scorer: std::collections::BTreeSet<ParamId> =
            self.arch.scorers.param_ids().into_iter().collect();
        (0..self.store.len())
            .map(ParamId)
            .filter(|id| !scorer.contains(id))
            .collect()
    }

    /// Put a `[B, n_c, n_t]` batch on the tape as `[B, n_c, n_t, 1]`.
    pub fn input(&self, tape: &mut Tape<T>, x: Tensor<T>) -> Result<Var> {
        let cfg = &self.config.encoder;
        let s = x.shape();
        let ok =
            (s.len() == 3 || (s.len() == 4 && s[3] == 1)) && s[1] == cfg.n_c && s[2] == cfg.n_t;
        if !ok {
            bail!(
                Dimension,
                "input batch {:?} does not match [B, {}, {}]",
                s,
                cfg.n_c,
                cfg.n_t
            );
        }
        let b = s[0];
        Ok(tape.constant(x.reshape(&[b, cfg.n_c, cfg.n_t, 1])?))
    }

    pub fn encode_local<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut RunCtx<'_, T, R>,
    ) -> Result<Var> {
        run_blocks(tape, &self.store, &self.arch.local, x, ctx)
    }

    /// `V(f_l)` split along depth into `(f_re, f_ir)`.
    pub fn decompose(&self, tape: &mut Tape<T>, f_l: Var) -> Result<(Var, Var)> {
        let v = tape.param(&self.store, self.arch.splitter);
        let out = tape.conv2d(f_l, v, (1, 1), Padding::Valid)?;
        split_depth(tape, out)
    }

    pub fn encode_global<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        f_re: Var,
        ctx: &mut RunCtx<'_, T, R>,
    ) -> Result<Var> {
        run_blocks(tape, &self.store, &self.arch.global, f_re, ctx)
    }

    pub fn classify(&self, tape: &mut Tape<T>, f_g: Var) -> Result<Var> {
        let (w, b) = self.arch.classifier;
        let (w, b) = (tape.param(&self.store, w), tape.param(&self.store, b));
        tape.dense(f_g, w, b)
    }

    /// `f_l = E_l(x)`, `(f_re, f_ir) = V(f_l)`, `f_g = E_g(f_re)`, logits `C(f_g)`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut RunCtx<'_, T, R>,
    ) -> Result<Features> {
        let f_l = self.encode_local(tape, x, ctx)?;
        let (f_re, f_ir) = self.decompose(tape, f_l)?;
        let f_g = self.encode_global(tape, f_re, ctx)?;
        let logits = self.classify(tape, f_g)?;
        Ok(Features {
            f_l,
            f_re,
            f_ir,
            f_g,
            logits,
        })
    }

    /// Eval-mode features for a batch.
    pub fn features(&self, x: Tensor<T>) -> Result<FeatureBundle<T>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = RunCtx::new(Mode::Eval, 0.0, &mut rng);
        let x = self.input(&mut tape, x)?;
        let f = self.forward(&mut tape, x, &mut ctx)?;
        Ok(FeatureBundle {
            f_l: tape.value(f.f_l).clone(),
            f_re: tape.value(f.f_re).clone(),
            f_ir: tape.value(f.f_ir).clone(),
            f_g: tape.value(f.f_g).clone(),
        })
    }

    /// Eval-mode class probabilities, one row per sample.
    pub fn predict_proba(&self, x: Tensor<T>) -> Result<Vec<[T; 2]>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = RunCtx::new(Mode::Eval, 0.0, &mut rng);
        let x = self.input(&mut tape, x)?;
        let f = self.forward(&mut tape, x, &mut ctx)?;
        Ok(tape
            .value(f.logits)
            .data()
            .chunks_exact(2)
            .map(|z| softmax2(z[0], z[1]))
            .collect())
    }

    /// Fold train-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::of(BN_MOMENTUM);
        let one_m = T::one() - m;
        for u in updates {
            for (id, batch) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
                let buf = self.store.buffer_mut(id).tensor.data_mut();
                for (r, &v) in buf.iter_mut().zip(batch) {
                    *r = m * *r + one_m * v;
                }
            }
        }
    }
}

fn softmax2<T: Scalar>(a: T, b: T) -> [T; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    [ea / s, eb / s]
}

/// First half of the depth axis is `f_re`, second half `f_ir`.
pub fn split_depth<T: Scalar>(tape: &mut Tape<T>, v_out: Var) -> Result<(Var, Var)> {
    let d = *tape.shape(v_out).last().unwrap();
    if d % 2 != 0 {
        bail!(
            Config,
            "splitter output depth {d} is odd; cannot split into two halves"
        );
    }
    let re = tape.slice_last(v_out, 0, d / 2)?;
    let ir = tape.slice_last(v_out, d / 2, d / 2)?;
    Ok((re, ir))
}

/// Stack trials into a `[B, n_c, n_t]` tensor.
pub fn batch_tensor<T: Scalar>(trials: &[&Trial]) -> Result<Tensor<T>> {
    let Some(first) = trials.first() else {
        bail!(BatchSize, "empty batch");
    };
    let (n_c, n_t) = (first.n_c(), first.n_t());
    let mut data = Vec::with_capacity(trials.len() * n_c * n_t);
    for t in trials {
        if t.n_c() != n_c || t.n_t() != n_t {
            bail!(
                Dimension,
                "batch mixes trial shapes {n_c}x{n_t} and {}x{}",
                t.n_c(),
                t.n_t()
            );
        }
        data.extend(t.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(vec![trials.len(), n_c, n_t], data)
}
