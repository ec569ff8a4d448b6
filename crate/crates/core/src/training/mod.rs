//! Mini-batch training with Gumbel temperature annealing, and resumable
//! training checkpoints.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::binio::{put_u32, put_u64, ByteReader};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::StampNet;
use crate::numerics::{
    adam_step, stream_rng, AdamConfig, AdamState, Mode, SeededRng, Stream, Tape, Tensor,
};

const TRAIN_MAGIC: &[u8; 4] = b"STTR";
const TRAIN_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub tau_initial: f64,
    pub tau_floor: f64,
    pub tau_rate: f64,
    pub tau_eval: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables periodic saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            tau_initial: 7.0,
            tau_floor: 0.2,
            tau_rate: 0.01,
            tau_eval: 0.01,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size must be at least 2 (batch norm needs two samples)",
            ));
        }
        // Written as positive conditions so NaN fails them.
        let schedule_ok =
            self.tau_floor > 0.0 && self.tau_initial >= self.tau_floor && self.tau_rate >= 0.0;
        if !schedule_ok {
            return Err(Error::config(
                "temperature schedule needs 0 < tau_floor <= tau_initial and tau_rate >= 0",
            ));
        }
        if self.tau_eval.is_nan() || self.tau_eval <= 0.0 {
            return Err(Error::config("tau_eval must be positive"));
        }
        let a = &self.adam;
        let adam_ok = a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.epsilon > 0.0;
        if !adam_ok {
            return Err(Error::config(
                "adam needs lr > 0, betas in [0, 1) and epsilon > 0",
            ));
        }
        Ok(())
    }
}

/// Temperature for epoch `epoch`: `max(floor, initial · exp(−rate · epoch))`.
pub fn anneal_tau(epoch: usize, cfg: &TrainConfig) -> f64 {
    (cfg.tau_initial * (-cfg.tau_rate * epoch as f64).exp()).max(cfg.tau_floor)
}

/// One line of the training report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau: f64,
    pub mean_loss: f64,
    pub seconds: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{{ epoch = {}, tau = {:.6}, mean_loss = {:.8e}, seconds = {:.3} }}",
            self.epoch, self.tau, self.mean_loss, self.seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

/// Stacks the images of `samples[indices]` into `[B, C, H, W]`.
pub fn stack_images(samples: &[Sample], indices: &[usize]) -> Result<Tensor> {
    let first = &samples[*indices.first().ok_or_else(|| Error::dim("empty batch"))?].image;
    let chw: Vec<usize> = match first.rank() {
        2 => vec![1, first.shape()[0], first.shape()[1]],
        3 => first.shape().to_vec(),
        r => {
            return Err(Error::dim(format!(
                "images must be rank 2 or 3, got rank {r}"
            )))
        }
    };
    let per: usize = chw.iter().product();
    let mut data = Vec::with_capacity(per * indices.len());
    for &i in indices {
        let img = &samples[i].image;
        if img.len() != per {
            return Err(Error::dim(format!(
                "sample {i} has shape {:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![indices.len()];
    shape.extend(chw);
    Tensor::new(shape, data)
}

/// Generator for the stochastic parts (dropout, Gumbel noise) of training
/// sample `index` during `epoch`.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> SeededRng {
    stream_rng(seed, Stream::Batch, ((epoch as u64) << 32) | index as u64)
}

/// The batch order for `epoch`: a permutation derived from `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch as u64));
    order
}

/// Runs one optimizer step on the given batch and returns its loss.
pub fn train_step(
    model: &mut StampNet,
    adam: &mut AdamState,
    cfg: &AdamConfig,
    images: &Tensor,
    tau: f64,
    rngs: &mut [SeededRng],
) -> Result<f64> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, images, tau, rngs, Mode::Train)?;
    let loss = tape.mse(pass.reconstruction, pass.input)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = pass
        .params
        .iter()
        .map(|&p| grads.take(p).expect("every parameter receives a gradient"))
        .collect();
    adam_step(model.params_mut(), &grads, adam, cfg)?;
    model.constrain_stamps();
    model.apply_batch_stats(&pass.batch_stats);
    Ok(value)
}

/// One pass over `dataset` at temperature `tau`; returns the mean batch loss.
/// A trailing batch with fewer than two samples is skipped.
pub fn train_epoch(
    model: &mut StampNet,
    adam: &mut AdamState,
    dataset: &Dataset,
    tau: f64,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let order = epoch_order(dataset.len(), cfg.seed, epoch);
    let mut total = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        if chunk.len() < 2 {
            continue;
        }
        let images = stack_images(&dataset.samples, chunk)?;
        let mut rngs: Vec<SeededRng> = chunk
            .iter()
            .map(|&i| sample_rng(cfg.seed, epoch, i))
            .collect();
        let loss =
            train_step(model, adam, &cfg.adam, &images, tau, &mut rngs).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("{msg} at epoch {epoch}, batch {b}, tau {tau}"))
                }
                other => other,
            })?;
        total += loss;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::config(
            "dataset has fewer than two samples; no batch to train on",
        ));
    }
    Ok(total / batches as f64)
}

/// Model, optimizer state and progress of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: StampNet,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Number of completed epochs; the next epoch to run.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: StampNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            model,
            adam,
            config,
            epoch: 0,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn tau(&self) -> f64 {
        anneal_tau(self.epoch, &self.config)
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let c = self.model.config();
        if dataset.canvas_width != c.canvas_width
            || dataset.canvas_height != c.canvas_height
            || dataset.channels() != c.channels
        {
            return Err(Error::dim(format!(
                "dataset is {}x{} with {} channel(s), model expects {}x{} with {}",
                dataset.canvas_width,
                dataset.canvas_height,
                dataset.channels(),
                c.canvas_width,
                c.canvas_height,
                c.channels
            )));
        }
        Ok(())
    }

    /// Trains the next epoch.
    pub fn step_epoch(&mut self, dataset: &Dataset) -> Result<EpochRecord> {
        self.check_dataset(dataset)?;
        let start = Instant::now();
        let tau = self.tau();
        let mean_loss = train_epoch(
            &mut self.model,
            &mut self.adam,
            dataset,
            tau,
            self.epoch,
            &self.config,
        )?;
        let record = EpochRecord {
            epoch: self.epoch,
            tau,
            mean_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete, calling `after_epoch`
    /// once per finished epoch (for logging and checkpointing).
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        mut after_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<TrainReport> {
        let mut report = TrainReport::default();
        while !self.is_finished() {
            let record = self.step_epoch(dataset)?;
            after_epoch(self, &record)?;
            report.epochs.push(record);
        }
        Ok(report)
    }

    /// Whether a periodic checkpoint is due after the epoch just completed.
    pub fn checkpoint_due(&self) -> bool {
        let every = self.config.checkpoint_every;
        self.is_finished() || (every > 0 && self.epoch.is_multiple_of(every))
    }

    /// Writes the model followed by the training state. The model section
    /// alone is a valid model checkpoint.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.model.write_to(w)?;
        w.write_all(TRAIN_MAGIC)?;
        put_u32(w, TRAIN_VERSION)?;
        let text = toml::to_string(&self.config).expect("train config serializes");
        put_u32(w, text.len() as u32)?;
        w.write_all(text.as_bytes())?;
        put_u64(w, self.epoch as u64)?;
        put_u64(w, self.adam.step)?;
        for t in self.adam.m.iter().chain(&self.adam.v) {
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        let model = StampNet::decode(&mut r)?;
        r.expect_magic(TRAIN_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != TRAIN_VERSION {
            return Err(Error::format(
                at,
                format!("unsupported training state version {version}"),
            ));
        }
        let at = r.offset();
        let len = r.u32()? as usize;
        if len > 1 << 20 {
            return Err(Error::format(at, "implausible config length"));
        }
        let text = String::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::format(at + 4, "train config is not UTF-8"))?;
        let config: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::format(at + 4, format!("train config: {e}")))?;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let mut moments = Vec::with_capacity(2 * model.params().len());
        for i in 0..2 * model.params().len() {
            let at = r.offset();
            let t = Tensor::decode(&mut r)?;
            let expect = model.params()[i % model.params().len()].shape();
            if t.shape() != expect {
                return Err(Error::format(
                    at,
                    format!(
                        "optimizer moment {i} has shape {:?}, expected {expect:?}",
                        t.shape()
                    ),
                ));
            }
            moments.push(t);
        }
        r.expect_eof()?;
        let v = moments.split_off(model.params().len());
        Ok(Self {
            model,
            adam: AdamState {
                step,
                m: moments,
                v,
            },
            config,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Reads the model section of a model or training checkpoint.
pub fn load_model(path: &Path) -> Result<StampNet> {
    StampNet::read_from(&mut BufReader::new(File::open(path)?))
}
