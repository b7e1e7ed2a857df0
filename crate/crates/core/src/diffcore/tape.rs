//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. `backward` walks the nodes in reverse recorded order,
//! so gradient accumulation order is fixed by the order of the forward calls.

use rand::Rng;

use crate::diffcore::kernels::{self, ConvGeom, Padding, PoolGeom};
use crate::diffcore::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{bail, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train or eval behavior for dropout and batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Elu {
        x: Var,
        alpha: T,
    },
    Softplus {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Neg {
        x: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Matmul {
        x: Var,
        w: Var,
        rows: usize,
        i: usize,
        o: usize,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reverse {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumSquares {
        x: Var,
    },
    LogMeanExp {
        x: Var,
        weights: Vec<T>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
        width: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Broadcast {
        x: Var,
        reps: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of a scalar w.r.t. every node that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        bail!(Dimension, "{op}: shapes {:?} and {:?} differ", a, b);
    }
    Ok(())
}

fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf tensor; `requires_grad` marks it as watched.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node so
    /// every use of a parameter accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.leaf(store.get(id).tensor.clone(), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Like [`Tape::param`] but detached: the value is used, no gradient flows.
    pub fn param_frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).tensor.clone())
    }

    /// Make later [`Tape::param`] calls for `id` return `v` (used to feed
    /// perturbed parameter values through the gradient oracle).
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        self.param_vars[id.0] = Some(v);
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(id.0).copied().flatten()
    }

    // ---- convolution family -------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom::conv(self.shape(x), self.shape(k), stride, padding)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), &geom);
        let t = Tensor::new(geom.out_shape().to_vec(), out)?;
        Ok(self.push(t, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    pub fn depthwise_conv(
        &mut self,
        x: Var,
        k: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom::depthwise(self.shape(x), self.shape(k), stride, padding)?;
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(k).data(), &geom);
        let t = Tensor::new(geom.out_shape().to_vec(), out)?;
        Ok(self.push(t, Op::Depthwise { x, k, geom }, &[x, k]))
    }

    /// Depthwise convolution followed by a 1x1 pointwise convolution.
    pub fn separable_conv(&mut self, x: Var, depthwise: Var, pointwise: Var) -> Result<Var> {
        let ps = self.shape(pointwise);
        if ps.len() != 4 || ps[0] != 1 || ps[1] != 1 {
            bail!(
                Dimension,
                "pointwise kernel must be [1,1,D,D_out], got {:?}",
                ps
            );
        }
        let h = self.depthwise_conv(x, depthwise, (1, 1), Padding::Valid)?;
        self.conv2d(h, pointwise, (1, 1), Padding::Valid)
    }

    pub fn max_pool(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), window, stride)?;
        let (out, arg) = kernels::max_pool_forward(self.value(x).data(), &geom);
        let t = Tensor::new(geom.out_shape().to_vec(), out)?;
        Ok(self.push(t, Op::MaxPool { x, arg }, &[x]))
    }

    // ---- normalization --------------------------------------------------------

    fn bn_check(&self, x: Var, scale: Var, shift: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        let d = *s.last().unwrap();
        if self.shape(scale) != [d] || self.shape(shift) != [d] {
            bail!(
                Dimension,
                "batch_norm: scale/shift must be [{d}], got {:?}/{:?}",
                self.shape(scale),
                self.shape(shift)
            );
        }
        Ok((self.value(x).len() / d, d))
    }

    /// Training-mode batch normalization over every axis but the last.
    /// Returns the output and the batch mean and (biased) variance per feature.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (rows, d) = self.bn_check(x, scale, shift)?;
        if self.shape(x)[0] < 2 {
            bail!(
                BatchSize,
                "batch_norm in train mode needs batch size >= 2, got {}",
                self.shape(x)[0]
            );
        }
        let xv = self.value(x).data();
        let n = T::of(rows as f64);
        let mut mean = vec![T::zero(); d];
        for r in 0..rows {
            for j in 0..d {
                mean[j] = mean[j] + xv[r * d + j];
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); d];
        for r in 0..rows {
            for j in 0..d {
                let c = xv[r * d + j] - mean[j];
                var[j] = var[j] + c * c;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![T::zero(); rows * d];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (xv[i] - mean[j]) * inv_std[j];
                out[i] = xhat[i] * sc[j] + sh[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train: true,
            },
            &[x, scale, shift],
        );
        Ok((v, mean, var))
    }

    /// Eval-mode batch normalization with fixed statistics:
    /// `(x - mean) / sqrt(var + eps) * scale + shift`.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (rows, d) = self.bn_check(x, scale, shift)?;
        if mean.len() != d || var.len() != d {
            bail!(
                Dimension,
                "batch_norm: running statistics must have {d} entries"
            );
        }
        let xv = self.value(x).data();
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = vec![T::zero(); rows * d];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (xv[i] - mean[j]) * inv_std[j];
                out[i] = xhat[i] * sc[j] + sh[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train: false,
            },
            &[x, scale, shift],
        ))
    }

    // ---- pointwise --------------------------------------------------------------

    pub fn elu(&mut self, x: Var, alpha: f64) -> Var {
        let a = T::of(alpha);
        let t = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { a * v.exp_m1() });
        self.push(t, Op::Elu { x, alpha: a }, &[x])
    }

    /// `max(z, 0) + log1p(exp(-|z|))`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.exp());
        self.push(t, Op::Exp { x }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| -v);
        self.push(t, Op::Neg { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar { x }, &[x])
    }

    fn zip(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |p, q| p + q)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |p, q| p - q)?;
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |p, q| p * q)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds `b` (shape `[D]`) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(b) != [d] {
            bail!(Dimension, "bias must be [{d}], got {:?}", self.shape(b));
        }
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(d) {
            for (v, &c) in row.iter_mut().zip(&bv) {
                *v = *v + c;
            }
        }
        Ok(self.push(t, Op::AddBias { x, b }, &[x, b]))
    }

    /// `[B, I] x [I, O]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            bail!(
                Dimension,
                "matmul: input {:?} and weights {:?} disagree on the inner dimension",
                xs,
                ws
            );
        }
        let (rows, i, o) = (xs[0], xs[1], ws[1]);
        let out = kernels::matmul(self.value(x).data(), self.value(w).data(), rows, i, o);
        let t = Tensor::new(vec![rows, o], out)?;
        Ok(self.push(t, Op::Matmul { x, w, rows, i, o }, &[x, w]))
    }

    /// Affine map `x W + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 {
            bail!(Dimension, "logits must be [B,K], got {:?}", s);
        }
        let (b, k) = (s[0], s[1]);
        if k < 2 {
            bail!(
                Config,
                "softmax cross-entropy needs at least 2 classes, got {k}"
            );
        }
        if labels.len() != b {
            bail!(Dimension, "{} labels for a batch of {}", labels.len(), b);
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            bail!(Config, "label {l} out of range for {k} classes");
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &z[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let se: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + se.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            loss = loss + (lse - row[labels[r]]);
        }
        let t = Tensor::scalar(loss / T::of(b as f64));
        Ok(self.push(
            t,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Config, "dropout rate {rate} outside [0, 1)");
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// Identity forward, negated gradient backward.
    pub fn gradient_reversal(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Reverse { x }, &[x])
    }

    // ---- reductions -----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares { x }, &[x])
    }

    /// `log(mean(exp(x)))` computed with the max subtracted.
    pub fn log_mean_exp(&mut self, x: Var) -> Var {
        let v = self.value(x).data();
        let m = v.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = v.iter().map(|&a| (a - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        let out = m + (s / T::of(v.len() as f64)).ln();
        let weights = e.iter().map(|&a| a / s).collect();
        self.push(Tensor::scalar(out), Op::LogMeanExp { x, weights }, &[x])
    }

    // ---- shape plumbing -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of zero tensors");
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                bail!(
                    Dimension,
                    "concat: leading axes {:?} and {:?} differ",
                    lead,
                    &s[..s.len() - 1]
                );
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let outer: usize = lead.iter().product();
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        let op = Op::Concat {
            parts: parts.iter().copied().zip(widths).collect(),
        };
        Ok(self.push(t, op, parts))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().unwrap();
        if len == 0 || start + len > width {
            bail!(
                Dimension,
                "slice [{start}, {}) outside last axis of {width}",
                start + len
            );
        }
        let data = self
            .value(x)
            .data()
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Slice {
                x,
                start,
                len,
                width,
            },
            &[x],
        ))
    }

    /// Reorder along axis 0: `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let row = self.value(x).len() / s[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= s[0]) {
            bail!(Dimension, "gather index {bad} outside batch of {}", s[0]);
        }
        let src = self.value(x).data();
        let data = index
            .iter()
            .flat_map(|&i| src[i * row..(i + 1) * row].iter().copied())
            .collect();
        let mut shape = s;
        shape[0] = index.len();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// `[B, D] -> [B, h, w, D]` by replication over the spatial grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            bail!(Dimension, "broadcast_spatial expects [B,D], got {:?}", s);
        }
        let (b, d) = (s[0], s[1]);
        let reps = h * w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * reps * d);
        for r in 0..b {
            for _ in 0..reps {
                data.extend_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let t = Tensor::new(vec![b, h, w, d], data)?;
        Ok(self.push(t, Op::Broadcast { x, reps }, &[x]))
    }

    // ---- backward ---------------------------------------------------------------

    /// Gradients of the scalar `loss` w.r.t. every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geom } => {
                if self.wants(*x) {
                    let gi = kernels::conv2d_backward_input(g, val(*k), geom);
                    self.accumulate(grads, *x, gi);
                }
                if self.wants(*k) {
                    let gk = kernels::conv2d_backward_kernel(val(*x), g, geom);
                    self.accumulate(grads, *k, gk);
                }
            }
            Op::Depthwise { x, k, geom } => {
                if self.wants(*x) {
                    let gi = kernels::depthwise_backward_input(g, val(*k), geom);
                    self.accumulate(grads, *x, gi);
                }
                if self.wants(*k) {
                    let gk = kernels::depthwise_backward_kernel(val(*x), g, geom);
                    self.accumulate(grads, *k, gk);
                }
            }
            Op::MaxPool { x, arg } => {
                let mut gi = vec![T::zero(); val(*x).len()];
                for (&a, &gv) in arg.iter().zip(g) {
                    gi[a] = gi[a] + gv;
                }
                self.accumulate(grads, *x, gi);
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let d = inv_std.len();
                let rows = g.len() / d;
                let sc = val(*scale);
                let mut dshift = vec![T::zero(); d];
                let mut dscale = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        let i = r * d + j;
                        dshift[j] = dshift[j] + g[i];
                        dscale[j] = dscale[j] + g[i] * xhat[i];
                    }
                }
                if self.wants(*x) {
                    let mut gi = vec![T::zero(); g.len()];
                    if *train {
                        // dx = inv_std / N * (N dxhat - sum dxhat - xhat sum(dxhat xhat))
                        let n = T::of(rows as f64);
                        for r in 0..rows {
                            for j in 0..d {
                                let i = r * d + j;
                                let dxhat = g[i] * sc[j];
                                gi[i] = inv_std[j] / n
                                    * (n * dxhat - dshift[j] * sc[j] - xhat[i] * dscale[j] * sc[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..d {
                                let i = r * d + j;
                                gi[i] = g[i] * sc[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, gi);
                }
                self.accumulate(grads, *scale, dscale);
                self.accumulate(grads, *shift, dshift);
            }
            Op::Elu { x, alpha } => {
                let (xv, yv) = (val(*x), node.value.data());
                let gi = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&gv, (&a, &y))| if a > T::zero() { gv } else { gv * (y + *alpha) })
                    .collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Softplus { x } => {
                let gi = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &z)| gv * sigmoid(z))
                    .collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Exp { x } => {
                let gi = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y)
                    .collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Neg { x } => self.accumulate(grads, *x, g.iter().map(|&v| -v).collect()),
            Op::Reverse { x } => self.accumulate(grads, *x, g.iter().map(|&v| -v).collect()),
            Op::Scale { x, c } => self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    self.accumulate(
                        grads,
                        *a,
                        g.iter().zip(val(*b)).map(|(&gv, &q)| gv * q).collect(),
                    );
                }
                if self.wants(*b) {
                    self.accumulate(
                        grads,
                        *b,
                        g.iter().zip(val(*a)).map(|(&gv, &p)| gv * p).collect(),
                    );
                }
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*b) {
                    let d = val(*b).len();
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Matmul { x, w, rows, i, o } => {
                if self.wants(*x) {
                    let gi = kernels::matmul_backward_input(g, val(*w), *rows, *i, *o);
                    self.accumulate(grads, *x, gi);
                }
                if self.wants(*w) {
                    let gw = kernels::matmul_backward_weight(val(*x), g, *rows, *i, *o);
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / T::of(b as f64);
                let mut gi: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gi[r * k + l] = gi[r * k + l] - scale;
                }
                self.accumulate(grads, *logits, gi);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(
                    grads,
                    *x,
                    g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect(),
                );
            }
            Op::Sum { x } => self.accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean { x } => {
                let n = val(*x).len();
                self.accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::SumSquares { x } => {
                let two = T::of(2.0);
                self.accumulate(grads, *x, val(*x).iter().map(|&v| two * v * g[0]).collect());
            }
            Op::LogMeanExp { x, weights } => {
                self.accumulate(grads, *x, weights.iter().map(|&w| w * g[0]).collect());
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let outer = g.len() / total;
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * w);
                        for r in 0..outer {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Slice {
                x,
                start,
                len,
                width,
            } => {
                let outer = g.len() / len;
                let mut gi = vec![T::zero(); outer * width];
                for r in 0..outer {
                    gi[r * width + start..r * width + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, gi);
            }
            Op::Gather { x, index } => {
                let n = val(*x).len();
                let row = g.len() / index.len();
                let mut gi = vec![T::zero(); n];
                for (r, &src) in index.iter().enumerate() {
                    for c in 0..row {
                        gi[src * row + c] = gi[src * row + c] + g[r * row + c];
                    }
                }
                self.accumulate(grads, *x, gi);
            }
            Op::Broadcast { x, reps } => {
                let n = val(*x).len();
                let b = node.value.shape()[0];
                let d = n / b;
                let mut gi = vec![T::zero(); n];
                for r in 0..b {
                    for k in 0..*reps {
                        let src = &g[(r * reps + k) * d..(r * reps + k + 1) * d];
                        for (a, &v) in gi[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *a = *a + v;
                        }
                    }
                }
                self.accumulate(grads, *x, gi);
            }
        }
    }

    /// Gradient per parameter id (None for parameters not on this tape or
    /// unreachable from the loss).
    pub fn param_grads(&self, grads: &Gradients<T>, n_params: usize) -> Vec<Option<Vec<T>>> {
        (0..n_params)
            .map(|i| {
                self.param_var(ParamId(i))
                    .and_then(|v| grads.get(v))
                    .map(|g| g.to_vec())
            })
            .collect()
    }
}
