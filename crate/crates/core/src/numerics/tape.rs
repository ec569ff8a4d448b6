//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Every operation appends a node holding its output value plus whatever it
//! needs to replay its adjoint. [`Tape::backward`] walks the nodes in exact
//! reverse order of recording.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, ConvGeom, SeparableDims, SeparableGrads};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a training-mode batch norm, used by the
/// caller to update running averages. `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum BatchNormMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Clone, Copy, Debug)]
struct StampDims {
    batch: usize,
    ny: usize,
    nx: usize,
    n: usize,
    c: usize,
    sy: usize,
    sx: usize,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
        channels: usize,
        inner: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        f_in: usize,
        f_out: usize,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
        k: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddConst {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Outer3 {
        a: Var,
        b: Var,
        c: Var,
        batch: usize,
        p: usize,
        q: usize,
        r: usize,
    },
    Stamp {
        sl: Var,
        bank: Var,
        dims: StampDims,
    },
    SeparableStamp {
        py: Var,
        px: Var,
        ps: Var,
        bank: Var,
        batch: usize,
        dims: SeparableDims,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`]. Every leaf that requires a
/// gradient has an entry, zero-filled if the loss does not depend on it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Moves the gradient of `var` out, leaving `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn dims_eq(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that takes part in differentiation.
    pub fn param(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D cross-correlation. Accepts `[c, h, w]` or batched `[b, c, h, w]`
    /// input against `[c_out, c_in, kh, kw]` kernels; the output keeps the
    /// input's rank.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, c_in, h, width) = match xs[..] {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(Error::dim(format!(
                    "conv2d input must be rank 3 or 4, got {xs:?}"
                )))
            }
        };
        let [c_out, wc_in, kh, kw] = ws[..] else {
            return Err(Error::dim(format!(
                "conv2d kernel must be rank 4, got {ws:?}"
            )));
        };
        if wc_in != c_in {
            return Err(Error::dim(format!(
                "conv2d kernel expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if let Some(b) = b {
            dims_eq(self.value(b).shape(), &[c_out], "conv2d bias")?;
        }
        let (pad_top, pad_left, h_out, w_out) = match padding {
            Padding::Valid => {
                if kh > h || kw > width {
                    return Err(Error::dim(format!(
                        "kernel {kh}x{kw} larger than input {h}x{width}"
                    )));
                }
                (0, 0, h - kh + 1, width - kw + 1)
            }
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, width),
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: width,
            c_out,
            kh,
            kw,
            pad_top,
            pad_left,
            h_out,
            w_out,
        };
        let out = kernels::conv2d_forward(
            &geom,
            batch,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let shape = if xs.len() == 3 {
            vec![c_out, h_out, w_out]
        } else {
            vec![batch, c_out, h_out, w_out]
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
            },
            &inputs,
        ))
    }

    /// 2×2 max pooling with stride 2 over the last two axes, which must be even.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("maxpool2d needs at least two axes"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!(
                "maxpool2d needs even spatial extents, got {h}x{w}"
            )));
        }
        let planes = shape[..shape.len() - 2].iter().product();
        let (out, argmax) = kernels::maxpool2x2_forward(planes, h, w, self.value(x).data());
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = h / 2;
        out_shape[r - 1] = w / 2;
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MaxPool { x, argmax },
            &[x],
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    /// Per-channel normalization of `[b, c, ...]` input followed by the
    /// learnable affine map `gamma · x̂ + beta`. In training mode the batch
    /// statistics are returned so the caller can update running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        epsilon: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batchnorm input must be [batch, channels, ...]"));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        dims_eq(self.value(gamma).shape(), &[c], "batchnorm scale")?;
        dims_eq(self.value(beta).shape(), &[c], "batchnorm shift")?;
        let xd = self.value(x).data();
        let (mean, var, stats, train) = match mode {
            BatchNormMode::Train => {
                if b < 2 {
                    return Err(Error::config(
                        "batchnorm in training mode needs a batch of at least 2",
                    ));
                }
                let (mean, var) = kernels::channel_moments(b, c, inner, xd);
                let n = (b * inner) as f64;
                let unbiased = var.iter().map(|v| v * n / (n - 1.0)).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batchnorm running statistics have wrong length"));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let range = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
                for i in range {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let var_out = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                channels: c,
                inner,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let n = self.value(x).len();
        self.dropout_with(x, rate, mode, || {
            (0..n).map(|_| rng.random::<f64>()).collect()
        })
    }

    /// Like [`Tape::dropout`], but the mask for row `i` of the leading axis is
    /// drawn from `rngs[i]`, so a sample's mask does not depend on its batch.
    pub fn dropout_rows<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rngs: &mut [R],
    ) -> Result<Var> {
        let shape = self.value(x).shape();
        if shape[0] != rngs.len() {
            return Err(Error::dim(format!(
                "dropout_rows: {} rows but {} generators",
                shape[0],
                rngs.len()
            )));
        }
        let row = self.value(x).len() / rngs.len();
        self.dropout_with(x, rate, mode, || {
            rngs.iter_mut()
                .flat_map(|r| (0..row).map(|_| r.random::<f64>()).collect::<Vec<_>>())
                .collect()
        })
    }

    fn dropout_with(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        uniforms: impl FnOnce() -> Vec<f64>,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            let value = Arc::clone(&self.nodes[x.0].value);
            let requires_grad = self.nodes[x.0].requires_grad;
            self.nodes.push(Node {
                value,
                op: Op::Reshape { x },
                requires_grad,
            });
            return Ok(Var(self.nodes.len() - 1));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = uniforms()
            .into_iter()
            .map(|u| if u < rate { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Affine map `x · wᵀ + b` for `x: [batch, f_in]`, `w: [f_out, f_in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [batch, f_in] = xs[..] else {
            return Err(Error::dim(format!(
                "dense input must be [batch, features], got {xs:?}"
            )));
        };
        let [f_out, w_in] = ws[..] else {
            return Err(Error::dim(format!(
                "dense weight must be rank 2, got {ws:?}"
            )));
        };
        if w_in != f_in {
            return Err(Error::dim(format!(
                "dense weight expects {w_in} inputs, got {f_in}"
            )));
        }
        dims_eq(self.value(b).shape(), &[f_out], "dense bias")?;
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(batch * f_out);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        kernels::gemm(
            batch,
            f_in,
            f_out,
            self.value(x).data(),
            (f_in as isize, 1),
            self.value(w).data(),
            (1, f_in as isize),
            1.0,
            &mut out,
            (f_out as isize, 1),
        );
        Ok(self.push(
            Tensor::new([batch, f_out], out)?,
            Op::Dense {
                x,
                w,
                b,
                batch,
                f_in,
                f_out,
            },
            &[x, w, b],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = (*self.nodes[x.0].value).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let k = *xv.shape().last().expect("tensors have rank >= 1");
        let out = Tensor::new(xv.shape().to_vec(), kernels::softmax_rows(k, xv.data()))
            .expect("softmax preserves shape");
        self.push(out, Op::Softmax { x, k }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        dims_eq(self.value(a).shape(), self.value(b).shape(), "add")?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a constant tensor; no gradient flows into `c`.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        dims_eq(self.value(x).shape(), c.shape(), "add_const")?;
        let out = Tensor::new(
            c.shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| a + b)
                .collect(),
        )?;
        Ok(self.push(out, Op::AddConst { x }, &[x]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        dims_eq(self.value(a).shape(), self.value(b).shape(), "mul")?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// Batched outer product of three vectors: `[b, p] ⊗ [b, q] ⊗ [b, r] → [b, p, q, r]`.
    pub fn outer3(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        let (sa, sb, sc) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
            self.value(c).shape().to_vec(),
        );
        let ([ba, p], [bb, q], [bc, r]) = (&sa[..], &sb[..], &sc[..]) else {
            return Err(Error::dim("outer3 operands must be [batch, len]"));
        };
        if ba != bb || ba != bc {
            return Err(Error::dim("outer3 operands disagree on batch size"));
        }
        let (batch, p, q, r) = (*ba, *p, *q, *r);
        let (ad, bd, cd) = (
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        let mut out = Vec::with_capacity(batch * p * q * r);
        for bi in 0..batch {
            let cv = &cd[bi * r..(bi + 1) * r];
            for i in 0..p {
                let ai = ad[bi * p + i];
                for j in 0..q {
                    let aij = ai * bd[bi * q + j];
                    out.extend(cv.iter().map(|&ck| aij * ck));
                }
            }
        }
        Ok(self.push(
            Tensor::new([batch, p, q, r], out)?,
            Op::Outer3 {
                a,
                b,
                c,
                batch,
                p,
                q,
                r,
            },
            &[a, b, c],
        ))
    }

    /// Stamp-layer rendering. `sl: [b, ny, nx, n]` holds placement mass per
    /// top-left position and stamp; `bank: [n, c, sy, sx]` holds the stamps.
    /// The output `[b, c, ny+sy-1, nx+sx-1]` is the sum of every stamp pasted
    /// at every position, weighted by its mass.
    pub fn stamp(&mut self, sl: Var, bank: Var) -> Result<Var> {
        let ss = self.value(sl).shape().to_vec();
        let bs = self.value(bank).shape().to_vec();
        let [batch, ny, nx, n] = ss[..] else {
            return Err(Error::dim(format!(
                "SL tensor must be [batch, ny, nx, n], got {ss:?}"
            )));
        };
        let [bn, c, sy, sx] = bs[..] else {
            return Err(Error::dim(format!(
                "stamp bank must be [n, c, sy, sx], got {bs:?}"
            )));
        };
        if bn != n {
            return Err(Error::dim(format!(
                "SL tensor has {n} stamp slots, bank has {bn} stamps"
            )));
        }
        let dims = StampDims {
            batch,
            ny,
            nx,
            n,
            c,
            sy,
            sx,
        };
        let (h, w) = (ny + sy - 1, nx + sx - 1);
        let mut out = vec![0.0; batch * c * h * w];
        let mut patches = vec![0.0; ny * nx * c * sy * sx];
        let (sld, bd) = (self.value(sl).data(), self.value(bank).data());
        for bi in 0..batch {
            kernels::stamp_forward_sample(
                ny,
                nx,
                n,
                c,
                sy,
                sx,
                &sld[bi * ny * nx * n..(bi + 1) * ny * nx * n],
                bd,
                &mut patches,
                &mut out[bi * c * h * w..(bi + 1) * c * h * w],
            );
        }
        Ok(self.push(
            Tensor::new([batch, c, h, w], out)?,
            Op::Stamp { sl, bank, dims },
            &[sl, bank],
        ))
    }

    /// Same result as `stamp(outer3(py, px, ps), bank)` for `py: [b, ny]`,
    /// `px: [b, nx]` and `ps: [b, n]`, computed without materializing the SL
    /// tensor: the stamps are mixed by `ps`, then correlated with `py` along
    /// rows and `px` along columns.
    pub fn stamp_separable(&mut self, py: Var, px: Var, ps: Var, bank: Var) -> Result<Var> {
        let bs = self.value(bank).shape().to_vec();
        let [n, c, sy, sx] = bs[..] else {
            return Err(Error::dim(format!(
                "stamp bank must be [n, c, sy, sx], got {bs:?}"
            )));
        };
        let (ys, xs, ks) = (
            self.value(py).shape(),
            self.value(px).shape(),
            self.value(ps).shape(),
        );
        let (&[batch, ny], &[bx, nx], &[bk, nk]) = (ys, xs, ks) else {
            return Err(Error::dim(format!(
                "stamp_separable needs rank-2 factors, got {ys:?}, {xs:?}, {ks:?}"
            )));
        };
        if bx != batch || bk != batch || nk != n {
            return Err(Error::dim(format!(
                "stamp_separable factors {ys:?}, {xs:?}, {ks:?} disagree with bank {bs:?}"
            )));
        }
        let dims = SeparableDims {
            ny,
            nx,
            n,
            c,
            sy,
            sx,
        };
        let (h, w) = (dims.height(), dims.width());
        let mut out = vec![0.0; batch * c * h * w];
        let mut eff = vec![0.0; c * sy * sx];
        let mut rows = vec![0.0; c * h * sx];
        let (yd, xd, kd, bd) = (
            self.value(py).data(),
            self.value(px).data(),
            self.value(ps).data(),
            self.value(bank).data(),
        );
        for bi in 0..batch {
            kernels::separable_stamp_sample(
                dims,
                &yd[bi * ny..(bi + 1) * ny],
                &xd[bi * nx..(bi + 1) * nx],
                &kd[bi * n..(bi + 1) * n],
                bd,
                &mut eff,
                &mut rows,
                &mut out[bi * c * h * w..(bi + 1) * c * h * w],
            );
        }
        Ok(self.push(
            Tensor::new([batch, c, h, w], out)?,
            Op::SeparableStamp {
                py,
                px,
                ps,
                bank,
                batch,
                dims,
            },
            &[py, px, ps, bank],
        ))
    }

    /// Elementwise clamp. The backward pass lets gradient through where the
    /// input lies inside `[lo, hi]` and blocks it outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Mean squared error, a `[1]` tensor.
    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var> {
        dims_eq(
            self.value(prediction).shape(),
            self.value(target).shape(),
            "mse",
        )?;
        let (p, t) = (self.value(prediction).data(), self.value(target).data());
        let total: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        let loss = total / p.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                a: prediction,
                b: target,
            },
            &[prediction, target],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`. May be called once per
    /// recording; call [`Tape::reset`] before reusing the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage(
                "backward already ran on this tape; reset it before recording again".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "loss handle does not belong to this tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.node_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(
                    Tensor::new(
                        node.value.shape().to_vec(),
                        g.unwrap_or_else(|| vec![0.0; node.value.len()]),
                    )
                    .expect("gradient matches its leaf"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(&contribution)
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn node_backward(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
            } => {
                let cg = kernels::conv2d_backward(
                    geom,
                    *batch,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.wants(*x),
                    self.wants(*w),
                    b.is_some_and(|b| self.wants(b)),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dweight {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.dbias) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= 0.0 { gv } else { slope * gv })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                channels,
                inner,
            } => {
                let c = *channels;
                let inner = *inner;
                let b = g.len() / (c * inner);
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
                        for i in r {
                            dgamma[ci] += g[i] * xhat[i];
                            dbeta[ci] += g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let n = (b * inner) as f64;
                    for ci in 0..c {
                        let scale = gd[ci] * inv_std[ci];
                        for bi in 0..b {
                            let r = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
                            for i in r {
                                dx[i] = if *train {
                                    scale * (g[i] - (dbeta[ci] + xhat[i] * dgamma[ci]) / n)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dense {
                x,
                w,
                b,
                batch,
                f_in,
                f_out,
            } => {
                let (batch, f_in, f_out) = (*batch, *f_in, *f_out);
                if self.wants(*x) {
                    let mut dx = vec![0.0; batch * f_in];
                    kernels::gemm(
                        batch,
                        f_out,
                        f_in,
                        g,
                        (f_out as isize, 1),
                        self.value(*w).data(),
                        (f_in as isize, 1),
                        0.0,
                        &mut dx,
                        (f_in as isize, 1),
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; f_out * f_in];
                    kernels::gemm(
                        f_out,
                        batch,
                        f_in,
                        g,
                        (1, f_out as isize),
                        self.value(*x).data(),
                        (f_in as isize, 1),
                        0.0,
                        &mut dw,
                        (f_in as isize, 1),
                    );
                    self.accumulate(grads, *w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; f_out];
                    for row in g.chunks_exact(f_out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Reshape { x } | Op::AddConst { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Softmax { x, k } => {
                let y = node.value.data();
                let mut dx = vec![0.0; g.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(*k)
                    .zip(g.chunks_exact(*k))
                    .zip(dx.chunks_exact_mut(*k))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Outer3 {
                a,
                b,
                c,
                batch,
                p,
                q,
                r,
            } => {
                let (p, q, r) = (*p, *q, *r);
                let (ad, bd, cd) = (
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                );
                let mut da = vec![0.0; batch * p];
                let mut db = vec![0.0; batch * q];
                let mut dc = vec![0.0; batch * r];
                for bi in 0..*batch {
                    let (av, bv, cv) = (
                        &ad[bi * p..(bi + 1) * p],
                        &bd[bi * q..(bi + 1) * q],
                        &cd[bi * r..(bi + 1) * r],
                    );
                    let gb = &g[bi * p * q * r..(bi + 1) * p * q * r];
                    for i in 0..p {
                        for j in 0..q {
                            let cell = &gb[(i * q + j) * r..(i * q + j + 1) * r];
                            let gc: f64 = cell.iter().zip(cv).map(|(x, y)| x * y).sum();
                            da[bi * p + i] += gc * bv[j];
                            db[bi * q + j] += gc * av[i];
                            let aij = av[i] * bv[j];
                            for (d, gv) in dc[bi * r..(bi + 1) * r].iter_mut().zip(cell) {
                                *d += aij * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
                self.accumulate(grads, *c, dc);
            }
            Op::Stamp { sl, bank, dims } => {
                let StampDims {
                    batch,
                    ny,
                    nx,
                    n,
                    c,
                    sy,
                    sx,
                } = *dims;
                let plen = c * sy * sx;
                let positions = ny * nx;
                let (h, w) = (ny + sy - 1, nx + sx - 1);
                let (want_sl, want_bank) = (self.wants(*sl), self.wants(*bank));
                let mut dsl = want_sl.then(|| vec![0.0; batch * positions * n]);
                let mut dbank = want_bank.then(|| vec![0.0; n * plen]);
                let mut patches = vec![0.0; positions * plen];
                let (sld, bd) = (self.value(*sl).data(), self.value(*bank).data());
                for bi in 0..batch {
                    kernels::stamp_gather_sample(
                        ny,
                        nx,
                        c,
                        sy,
                        sx,
                        &g[bi * c * h * w..(bi + 1) * c * h * w],
                        &mut patches,
                    );
                    if let Some(dsl) = dsl.as_mut() {
                        // dSL[pos, n] = patches[pos, plen] · bankᵀ[plen, n]
                        kernels::gemm(
                            positions,
                            plen,
                            n,
                            &patches,
                            (plen as isize, 1),
                            bd,
                            (1, plen as isize),
                            0.0,
                            &mut dsl[bi * positions * n..(bi + 1) * positions * n],
                            (n as isize, 1),
                        );
                    }
                    if let Some(dbank) = dbank.as_mut() {
                        // dBank[n, plen] += SLᵀ[n, pos] · patches[pos, plen]
                        kernels::gemm(
                            n,
                            positions,
                            plen,
                            &sld[bi * positions * n..(bi + 1) * positions * n],
                            (1, n as isize),
                            &patches,
                            (plen as isize, 1),
                            1.0,
                            dbank,
                            (plen as isize, 1),
                        );
                    }
                }
                if let Some(dsl) = dsl {
                    self.accumulate(grads, *sl, dsl);
                }
                if let Some(dbank) = dbank {
                    self.accumulate(grads, *bank, dbank);
                }
            }
            Op::SeparableStamp {
                py,
                px,
                ps,
                bank,
                batch,
                dims,
            } => {
                let SeparableDims { ny, nx, n, c, .. } = *dims;
                let plane = c * dims.height() * dims.width();
                let (yd, xd, kd, bd) = (
                    self.value(*py).data(),
                    self.value(*px).data(),
                    self.value(*ps).data(),
                    self.value(*bank).data(),
                );
                let mut dpy = vec![0.0; batch * ny];
                let mut dpx = vec![0.0; batch * nx];
                let mut dps = vec![0.0; batch * n];
                let mut dbank = self.wants(*bank).then(|| vec![0.0; bd.len()]);
                for bi in 0..*batch {
                    kernels::separable_stamp_backward_sample(
                        *dims,
                        &yd[bi * ny..(bi + 1) * ny],
                        &xd[bi * nx..(bi + 1) * nx],
                        &kd[bi * n..(bi + 1) * n],
                        bd,
                        &g[bi * plane..(bi + 1) * plane],
                        SeparableGrads {
                            dpy: &mut dpy[bi * ny..(bi + 1) * ny],
                            dpx: &mut dpx[bi * nx..(bi + 1) * nx],
                            dps: &mut dps[bi * n..(bi + 1) * n],
                            dbank: dbank.as_deref_mut(),
                        },
                    );
                }
                self.accumulate(grads, *py, dpy);
                self.accumulate(grads, *px, dpx);
                self.accumulate(grads, *ps, dps);
                if let Some(dbank) = dbank {
                    self.accumulate(grads, *bank, dbank);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * g[0] / av.len() as f64;
                let da: Vec<f64> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                if self.wants(*b) {
                    self.accumulate(grads, *b, da.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, vec![g[0]; self.value(*x).len()]);
            }
        }
    }
}
