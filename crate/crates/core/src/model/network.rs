use std::io::{Read, Write};

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use super::config::ModelConfig;
use super::gumbel::gumbel_softmax;
use super::layers::{ShapeLatent, StampBank};
use crate::binio::{put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::{
    stream_rng, BatchNormMode, BatchStats, Mode, Padding, SeededRng, Stream, Tape, Tensor, Var,
};

const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct ConvSlot {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    pool_after: bool,
}

#[derive(Clone, Copy, Debug)]
struct HeadSlot {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    convs: Vec<ConvSlot>,
    trunk: HeadSlot,
    /// Per shape: x, y and stamp heads.
    heads: Vec<[HeadSlot; 3]>,
    stamps: usize,
}

/// Tape handles for one shape's three relaxed categorical samples,
/// each `[batch, len]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub x: Var,
    pub y: Var,
    pub s: Var,
}

/// Everything a forward pass recorded on the tape.
pub struct ForwardPass {
    pub params: Vec<Var>,
    pub input: Var,
    pub features: Var,
    pub latents: Vec<LatentVars>,
    /// Global SL tensor, `[batch, ny, nx, n]`.
    pub sl: Var,
    /// Clamped reconstruction, `[batch, channels, height, width]`.
    pub reconstruction: Var,
    /// Batch statistics from training-mode batch norms, in layer order.
    pub batch_stats: Vec<BatchStats>,
}

impl ForwardPass {
    /// Copies the per-sample latent distributions off the tape.
    pub fn latents(&self, tape: &Tape) -> Vec<Vec<ShapeLatent>> {
        let batch = tape.value(self.input).shape()[0];
        let row = |var: Var, b: usize| {
            let t = tape.value(var);
            let k = t.shape()[1];
            t.data()[b * k..(b + 1) * k].to_vec()
        };
        (0..batch)
            .map(|b| {
                self.latents
                    .iter()
                    .map(|l| ShapeLatent {
                        p_x: row(l.x, b),
                        p_y: row(l.y, b),
                        p_s: row(l.s, b),
                    })
                    .collect()
            })
            .collect()
    }
}

/// Result of an evaluation-mode pass over a batch.
pub struct Inference {
    pub reconstruction: Tensor,
    pub latents: Vec<Vec<ShapeLatent>>,
}

/// The full autoencoder: convolutional encoder, per-shape categorical heads,
/// and the stamp layer.
#[derive(Clone, Debug)]
pub struct StampNet {
    config: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    running: Vec<RunningStats>,
    layout: Layout,
}

struct ParamBuilder<'a> {
    params: Vec<Tensor>,
    names: Vec<String>,
    rng: &'a mut SeededRng,
}

impl ParamBuilder<'_> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], lo: f64, hi: f64) -> usize {
        let dist = Uniform::new_inclusive(lo, hi).expect("valid range");
        let t = Tensor::from_fn(shape, |_| dist.sample(self.rng));
        self.push(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, Tensor::full(shape, 1.0))
    }
}

impl StampNet {
    /// Fresh model with weights drawn from `seed`.
    ///
    /// Parameter order (also the checkpoint order): for every encoder
    /// convolution its weight, bias, batch-norm scale and shift; the trunk
    /// weight and bias; for every shape the x, y and stamp head weight and
    /// bias; finally the stamp bank.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let enc = &config.encoder;
        let mut b = ParamBuilder {
            params: Vec::new(),
            names: Vec::new(),
            rng: &mut rng,
        };
        let relu_gain = 1.0 + enc.leaky_slope * enc.leaky_slope;
        let mut convs = Vec::new();
        let mut c_in = config.channels;
        for (block, &width) in enc.block_widths.iter().enumerate() {
            for j in 0..enc.convs_per_block {
                let fan_in = (c_in * 9) as f64;
                let bound = (6.0 / (relu_gain * fan_in)).sqrt();
                let name = format!("encoder.block{block}.conv{j}");
                let weight = b.uniform(
                    format!("{name}.weight"),
                    &[width, c_in, 3, 3],
                    -bound,
                    bound,
                );
                let bias = b.zeros(format!("{name}.bias"), &[width]);
                let gamma = b.ones(format!("{name}.bn.scale"), &[width]);
                let beta = b.zeros(format!("{name}.bn.shift"), &[width]);
                convs.push(ConvSlot {
                    weight,
                    bias,
                    gamma,
                    beta,
                    pool_after: j + 1 == enc.convs_per_block && block < config.pool_stages(),
                });
                c_in = width;
            }
        }
        let flat = config.flat_features();
        let d = enc.dense_width;
        let bound = (6.0 / (relu_gain * flat as f64)).sqrt();
        let trunk = HeadSlot {
            weight: b.uniform("trunk.weight".into(), &[d, flat], -bound, bound),
            bias: b.zeros("trunk.bias".into(), &[d]),
        };
        let mut heads = Vec::new();
        for shape in 0..config.shapes {
            let mut slots = [trunk; 3];
            for (slot, (axis, len)) in slots.iter_mut().zip([
                ("x", config.nx()),
                ("y", config.ny()),
                ("stamp", config.stamps),
            ]) {
                let bound = (6.0 / (d + len) as f64).sqrt();
                let name = format!("head{shape}.{axis}");
                *slot = HeadSlot {
                    weight: b.uniform(format!("{name}.weight"), &[len, d], -bound, bound),
                    bias: b.zeros(format!("{name}.bias"), &[len]),
                };
            }
            heads.push(slots);
        }
        let stamps = b.uniform(
            "stamps".into(),
            &[
                config.stamps,
                config.channels,
                config.stamp_height,
                config.stamp_width,
            ],
            0.0,
            0.1 * config.v_max,
        );
        let (params, names) = (b.params, b.names);
        let running = convs
            .iter()
            .map(|c| {
                let w = params[c.gamma].len();
                RunningStats {
                    mean: vec![0.0; w],
                    var: vec![1.0; w],
                }
            })
            .collect();
        Ok(Self {
            config,
            params,
            names,
            running,
            layout: Layout {
                convs,
                trunk,
                heads,
                stamps,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn stamp_index(&self) -> usize {
        self.layout.stamps
    }

    pub fn stamp_bank(&self) -> StampBank {
        StampBank::new(self.params[self.layout.stamps].clone()).expect("bank is rank 4")
    }

    pub fn set_stamp_bank(&mut self, bank: StampBank) -> Result<()> {
        if bank.kernels.shape() != self.params[self.layout.stamps].shape() {
            return Err(Error::dim(format!(
                "stamp bank {:?} does not fit model {:?}",
                bank.kernels.shape(),
                self.params[self.layout.stamps].shape()
            )));
        }
        self.params[self.layout.stamps] = bank.kernels;
        Ok(())
    }

    /// Clamps the stamp bank into `[0, v_max]`.
    pub fn constrain_stamps(&mut self) {
        let v_max = self.config.v_max;
        crate::numerics::clip_values(&mut self.params[self.layout.stamps], 0.0, v_max);
    }

    /// Indices of the head parameters for shape `shape` (x, y, stamp; weight then bias).
    pub fn head_param_indices(&self, shape: usize) -> Vec<usize> {
        self.layout.heads[shape]
            .iter()
            .flat_map(|h| [h.weight, h.bias])
            .collect()
    }

    /// Makes shape `shape`'s heads ignore the image and favour position
    /// `(x, y)` and stamp `stamp` with logit margin `strength`: weights are
    /// zeroed and the biases set to `strength` on the chosen entries.
    pub fn pin_head(
        &mut self,
        shape: usize,
        x: usize,
        y: usize,
        stamp: usize,
        strength: f64,
    ) -> Result<()> {
        let c = &self.config;
        if shape >= c.shapes || x >= c.nx() || y >= c.ny() || stamp >= c.stamps {
            return Err(Error::config(format!(
                "pin_head({shape}, {x}, {y}, {stamp}) is outside M={}, nx={}, ny={}, N={}",
                c.shapes,
                c.nx(),
                c.ny(),
                c.stamps
            )));
        }
        let idx = self.head_param_indices(shape);
        for (pair, choice) in idx.chunks(2).zip([x, y, stamp]) {
            self.params[pair[0]].data_mut().fill(0.0);
            let bias = self.params[pair[1]].data_mut();
            bias.fill(0.0);
            bias[choice] = strength;
        }
        Ok(())
    }

    /// Folds training-mode batch statistics into the running averages:
    /// `running ← momentum · running + (1 − momentum) · batch`.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        let m = self.config.encoder.bn_momentum;
        for (run, s) in self.running.iter_mut().zip(stats) {
            for (r, &b) in run.mean.iter_mut().zip(&s.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, &b) in run.var.iter_mut().zip(&s.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1..] != [c.channels, c.canvas_height, c.canvas_width] {
            return Err(Error::dim(format!(
                "model expects [batch, {}, {}, {}] images, got {s:?}",
                c.channels, c.canvas_height, c.canvas_width
            )));
        }
        Ok(())
    }

    /// Records the whole model on `tape`, registering every parameter as a
    /// differentiable leaf. `rngs` holds one generator per batch row.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        tau: f64,
        rngs: &mut [R],
        mode: Mode,
    ) -> Result<ForwardPass> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        self.record(tape, &params, images, tau, rngs, mode)
    }

    /// Like [`StampNet::forward`] but with caller-supplied parameter handles,
    /// in [`StampNet::params`] order.
    pub fn record<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        images: &Tensor,
        tau: f64,
        rngs: &mut [R],
        mode: Mode,
    ) -> Result<ForwardPass> {
        self.check_images(images)?;
        if params.len() != self.params.len() {
            return Err(Error::dim(
                "parameter handle count does not match the model",
            ));
        }
        if rngs.len() != images.shape()[0] {
            return Err(Error::dim("need one generator per batch row"));
        }
        let input = tape.constant(images.clone());
        let (features, batch_stats) = self.encode(tape, params, input, rngs, mode)?;
        let latents = self.heads(tape, params, features, tau, rngs)?;
        let (sl, reconstruction) = self.render(tape, params, &latents)?;
        Ok(ForwardPass {
            params: params.to_vec(),
            input,
            features,
            latents,
            sl,
            reconstruction,
            batch_stats,
        })
    }

    /// Convolutional encoder plus dense trunk; returns `[batch, dense_width]`.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        rngs: &mut [R],
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let enc = &self.config.encoder;
        let mut h = input;
        let mut stats = Vec::new();
        for (slot, run) in self.layout.convs.iter().zip(&self.running) {
            h = tape.conv2d(
                h,
                params[slot.weight],
                Some(params[slot.bias]),
                Padding::Same,
            )?;
            h = tape.leaky_relu(h, enc.leaky_slope);
            let bn_mode = match mode {
                Mode::Train => BatchNormMode::Train,
                Mode::Eval => BatchNormMode::Eval {
                    mean: &run.mean,
                    var: &run.var,
                },
            };
            let (out, s) = tape.batchnorm(
                h,
                params[slot.gamma],
                params[slot.beta],
                bn_mode,
                enc.bn_epsilon,
            )?;
            h = out;
            stats.extend(s);
            if slot.pool_after {
                h = tape.maxpool2d(h)?;
            }
        }
        let batch = tape.value(h).shape()[0];
        let flat = tape.value(h).len() / batch;
        h = tape.reshape(h, [batch, flat])?;
        h = tape.dense(
            h,
            params[self.layout.trunk.weight],
            params[self.layout.trunk.bias],
        )?;
        h = tape.leaky_relu(h, enc.leaky_slope);
        h = tape.dropout_rows(h, enc.dropout, mode, rngs)?;
        Ok((h, stats))
    }

    /// Per-shape dense heads followed by Gumbel-softmax sampling.
    pub fn heads<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        features: Var,
        tau: f64,
        rngs: &mut [R],
    ) -> Result<Vec<LatentVars>> {
        self.layout
            .heads
            .iter()
            .map(|slots| {
                let mut out = [features; 3];
                for (o, h) in out.iter_mut().zip(slots) {
                    let logits = tape.dense(features, params[h.weight], params[h.bias])?;
                    *o = gumbel_softmax(tape, logits, tau, rngs)?;
                }
                Ok(LatentVars {
                    x: out[0],
                    y: out[1],
                    s: out[2],
                })
            })
            .collect()
    }

    /// Builds each shape's SL tensor and renders the clamped reconstruction
    /// through the stamp layer. Each shape's SL tensor is an outer product,
    /// so it is rendered in separable form; the summed SL tensor is still
    /// recorded for inspection.
    pub fn render(
        &self,
        tape: &mut Tape,
        params: &[Var],
        latents: &[LatentVars],
    ) -> Result<(Var, Var)> {
        let stamps = params[self.layout.stamps];
        let mut acc: Option<(Var, Var)> = None;
        for l in latents {
            let single = tape.outer3(l.y, l.x, l.s)?;
            let canvas = tape.stamp_separable(l.y, l.x, l.s, stamps)?;
            acc = Some(match acc {
                None => (single, canvas),
                Some((sl, sum)) => (tape.add(sl, single)?, tape.add(sum, canvas)?),
            });
        }
        let (sl, canvas) = acc.ok_or_else(|| Error::config("model has no shapes"))?;
        let recon = tape.clamp(canvas, 0.0, self.config.v_max);
        Ok((sl, recon))
    }

    /// Evaluation-mode pass (running batch statistics, no dropout).
    pub fn infer<R: Rng>(&self, images: &Tensor, tau: f64, rngs: &mut [R]) -> Result<Inference> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let pass = self.record(&mut tape, &params, images, tau, rngs, Mode::Eval)?;
        Ok(Inference {
            latents: pass.latents(&tape),
            reconstruction: tape.value(pass.reconstruction).clone(),
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        let text = self.config.to_toml();
        put_u32(w, text.len() as u32)?;
        w.write_all(text.as_bytes())?;
        put_u32(w, self.params.len() as u32)?;
        for p in &self.params {
            p.write_to(w)?;
        }
        put_u32(w, self.running.len() as u32)?;
        for r in &self.running {
            Tensor::new([r.mean.len()], r.mean.clone())?.write_to(w)?;
            Tensor::new([r.var.len()], r.var.clone())?.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        Self::decode(&mut ByteReader::new(r))
    }

    pub(crate) fn decode<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                at,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let at = r.offset();
        let len = r.u32()? as usize;
        if len > 1 << 20 {
            return Err(Error::format(at, "implausible config length"));
        }
        let text = String::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::format(at + 4, "model config is not UTF-8"))?;
        let config = ModelConfig::from_toml(&text)?;
        let mut model = Self::new(config, 0)?;
        let at = r.offset();
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::format(
                at,
                format!(
                    "checkpoint has {count} tensors, config implies {}",
                    model.params.len()
                ),
            ));
        }
        for (i, slot) in model.params.iter_mut().enumerate() {
            let at = r.offset();
            let t = Tensor::decode(r)?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    at,
                    format!(
                        "parameter {} has shape {:?}, config implies {:?}",
                        model.names[i],
                        t.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = t;
        }
        let at = r.offset();
        let count = r.u32()? as usize;
        if count != model.running.len() {
            return Err(Error::format(at, "batch-norm buffer count mismatch"));
        }
        for run in model.running.iter_mut() {
            let at = r.offset();
            let mean = Tensor::decode(r)?.into_data();
            let var = Tensor::decode(r)?.into_data();
            if mean.len() != run.mean.len() || var.len() != run.var.len() {
                return Err(Error::format(at, "batch-norm buffer length mismatch"));
            }
            run.mean = mean;
            run.var = var;
        }
        Ok(model)
    }

    /// Checks that `other` has exactly this model's architecture.
    pub fn ensure_compatible(&self, other: &ModelConfig) -> Result<()> {
        if &self.config != other {
            return Err(Error::dim(format!(
                "checkpoint model ({}x{} canvas, {}x{} stamps, M={}, N={}) does not match \
                 the configured model ({}x{} canvas, {}x{} stamps, M={}, N={})",
                self.config.canvas_width,
                self.config.canvas_height,
                self.config.stamp_width,
                self.config.stamp_height,
                self.config.shapes,
                self.config.stamps,
                other.canvas_width,
                other.canvas_height,
                other.stamp_width,
                other.stamp_height,
                other.shapes,
                other.stamps,
            )));
        }
        Ok(())
    }
}
