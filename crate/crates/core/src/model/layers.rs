//! Layer lists shared by the encoders and the global scorer's embedder.

use rand::Rng;

use crate::diffcore::{
    init, BufferId, Mode, Padding, ParamId, ParamStore, Scalar, Tape, Tensor, Var, BN_EPS,
};
use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Valid, stride-1 convolution with a `[kh, kw, d_in, d_out]` kernel.
    Conv {
        kernel: ParamId,
        bias: Option<ParamId>,
        shape: [usize; 4],
    },
    /// Valid, stride-1 depthwise convolution with a `[kh, kw, d_in, mult]` kernel.
    Depthwise {
        kernel: ParamId,
        bias: Option<ParamId>,
        shape: [usize; 4],
    },
    BatchNorm {
        scale: ParamId,
        shift: ParamId,
        mean: BufferId,
        var: BufferId,
    },
    Elu,
    /// `[1, width]` window with stride `width` along time.
    MaxPool {
        width: usize,
    },
    Dropout,
    Flatten,
}

/// A named group of layers; shape errors name the block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
}

/// Batch statistics from one train-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate<T> {
    pub mean_id: BufferId,
    pub var_id: BufferId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-forward settings and outputs shared by every block.
pub struct RunCtx<'a, T, R: ?Sized> {
    pub mode: Mode,
    pub dropout: f64,
    pub rng: &'a mut R,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T, R: ?Sized> RunCtx<'a, T, R> {
    pub fn new(mode: Mode, dropout: f64, rng: &'a mut R) -> Self {
        RunCtx {
            mode,
            dropout,
            rng,
            bn_updates: Vec::new(),
        }
    }
}

pub const ELU_ALPHA: f64 = 1.0;

/// Adds parameters while building a network; fixes naming and init order.
pub struct Builder<'a, T: Scalar, R: Rng + ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    /// l2 coefficient given to weight tensors; biases and BN always get 0.
    pub l2: f64,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    pub fn conv(&mut self, name: &str, shape: [usize; 4], bias: bool) -> Result<Layer> {
        let kernel = self.store.add(
            &format!("{name}.kernel"),
            init::conv_kernel(shape, self.rng),
            self.l2,
        )?;
        let bias = if bias {
            Some(
                self.store
                    .add(&format!("{name}.bias"), Tensor::zeros(&[shape[3]]), 0.0)?,
            )
        } else {
            None
        };
        Ok(Layer::Conv {
            kernel,
            bias,
            shape,
        })
    }

    pub fn depthwise(&mut self, name: &str, shape: [usize; 4], bias: bool) -> Result<Layer> {
        let rf = shape[0] * shape[1];
        let t = init::glorot_uniform(&shape, rf, rf * shape[3], self.rng);
        let kernel = self.store.add(&format!("{name}.kernel"), t, self.l2)?;
        let bias = if bias {
            Some(self.store.add(
                &format!("{name}.bias"),
                Tensor::zeros(&[shape[2] * shape[3]]),
                0.0,
            )?)
        } else {
            None
        };
        Ok(Layer::Depthwise {
            kernel,
            bias,
            shape,
        })
    }

    pub fn batch_norm(&mut self, name: &str, depth: usize) -> Result<Layer> {
        Ok(Layer::BatchNorm {
            scale: self.store.add(
                &format!("{name}.scale"),
                Tensor::full(&[depth], T::one()),
                0.0,
            )?,
            shift: self
                .store
                .add(&format!("{name}.shift"), Tensor::zeros(&[depth]), 0.0)?,
            mean: self
                .store
                .add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[depth]))?,
            var: self.store.add_buffer(
                &format!("{name}.running_var"),
                Tensor::full(&[depth], T::one()),
            )?,
        })
    }

    /// Dense `[i, o]` weight plus `[o]` bias.
    pub fn dense(&mut self, name: &str, i: usize, o: usize) -> Result<(ParamId, ParamId)> {
        let w = self.store.add(
            &format!("{name}.weight"),
            init::glorot_uniform(&[i, o], i, o, self.rng),
            self.l2,
        )?;
        let b = self
            .store
            .add(&format!("{name}.bias"), Tensor::zeros(&[o]), 0.0)?;
        Ok((w, b))
    }
}

/// Output shape of `layer` for `input` (NHWC, or `[B, F]` after flatten).
pub fn layer_shape(layer: &Layer, input: &[usize], block: &str) -> Result<Vec<usize>> {
    let s = input;
    let need4 = || -> Result<()> {
        if s.len() != 4 {
            bail!(Dimension, "{block}: expected a 4-D feature map, got {s:?}");
        }
        Ok(())
    };
    match layer {
        Layer::Conv { shape: k, .. } | Layer::Depthwise { shape: k, .. } => {
            need4()?;
            if s[3] != k[2] {
                bail!(
                    Dimension,
                    "{block}: kernel expects depth {} but the input has depth {}",
                    k[2],
                    s[3]
                );
            }
            if s[1] < k[0] {
                bail!(
                    Dimension,
                    "{block}: height {} is shorter than the kernel height {}",
                    s[1],
                    k[0]
                );
            }
            if s[2] < k[1] {
                bail!(
                    Dimension,
                    "{block}: temporal extent {} is shorter than the kernel length {}",
                    s[2],
                    k[1]
                );
            }
            let d = if matches!(layer, Layer::Conv { .. }) {
                k[3]
            } else {
                k[2] * k[3]
            };
            Ok(vec![s[0], s[1] - k[0] + 1, s[2] - k[1] + 1, d])
        }
        Layer::MaxPool { width } => {
            need4()?;
            if s[2] < *width {
                bail!(
                    Dimension,
                    "{block}: temporal extent {} is shorter than the pool width {width}",
                    s[2]
                );
            }
            Ok(vec![s[0], s[1], s[2] / width, s[3]])
        }
        Layer::Flatten => Ok(vec![s[0], s[1..].iter().product()]),
        Layer::BatchNorm { .. } | Layer::Elu | Layer::Dropout => Ok(s.to_vec()),
    }
}

pub fn blocks_shape(blocks: &[Block], input: &[usize]) -> Result<Vec<usize>> {
    let mut s = input.to_vec();
    for b in blocks {
        for l in &b.layers {
            s = layer_shape(l, &s, &b.name)?;
        }
    }
    Ok(s)
}

pub fn run_layer<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &Layer,
    x: Var,
    ctx: &mut RunCtx<'_, T, R>,
) -> Result<Var> {
    Ok(match *layer {
        Layer::Conv { kernel, bias, .. } => {
            let k = tape.param(store, kernel);
            let y = tape.conv2d(x, k, (1, 1), Padding::Valid)?;
            match bias {
                Some(b) => {
                    let b = tape.param(store, b);
                    tape.add_bias(y, b)?
                }
                None => y,
            }
        }
        Layer::Depthwise { kernel, bias, .. } => {
            let k = tape.param(store, kernel);
            let y = tape.depthwise_conv(x, k, (1, 1), Padding::Valid)?;
            match bias {
                Some(b) => {
                    let b = tape.param(store, b);
                    tape.add_bias(y, b)?
                }
                None => y,
            }
        }
        Layer::BatchNorm {
            scale,
            shift,
            mean,
            var,
        } => {
            let (sc, sh) = (tape.param(store, scale), tape.param(store, shift));
            match ctx.mode {
                Mode::Train => {
                    let (y, m, v) = tape.batch_norm_train(x, sc, sh, BN_EPS)?;
                    ctx.bn_updates.push(BnUpdate {
                        mean_id: mean,
                        var_id: var,
                        mean: m,
                        var: v,
                    });
                    y
                }
                Mode::Eval => {
                    let (m, v) = (
                        store.buffer(mean).tensor.data(),
                        store.buffer(var).tensor.data(),
                    );
                    tape.batch_norm_eval(x, sc, sh, m, v, BN_EPS)?
                }
            }
        }
        Layer::Elu => tape.elu(x, ELU_ALPHA),
        Layer::MaxPool { width } => tape.max_pool(x, (1, width), (1, width))?,
        Layer::Dropout => tape.dropout(x, ctx.dropout, ctx.mode, ctx.rng)?,
        Layer::Flatten => tape.flatten(x)?,
    })
}

pub fn run_blocks<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    blocks: &[Block],
    mut x: Var,
    ctx: &mut RunCtx<'_, T, R>,
) -> Result<Var> {
    for b in blocks {
        for l in &b.layers {
            x = run_layer(tape, store, l, x, ctx)?;
        }
    }
    Ok(x)
}
