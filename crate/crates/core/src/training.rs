//! Batch assembly, optimizer, schedules and the pretraining loop.

use std::fmt;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::cloud::{sample_points, PointCloud};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss_cls, contrastive_loss_seg, LossConfig};
use crate::models::{clouds_to_tensor, Model, ModelConfig, Pass};
use crate::scalar::{lit, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transforms::{apply_transform_indexed, TransformSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// One embedding per cloud.
    Cls,
    /// One embedding per point.
    Seg,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Objective::Cls),
            "seg" => Ok(Objective::Seg),
            other => Err(Error::config(format!("unknown objective {other:?} (cls or seg)"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Cls => "cls",
            Objective::Seg => "seg",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Contrastive pairs per batch; the batch holds twice as many clouds.
    pub pairs: usize,
    pub epochs: usize,
    /// Points sampled from every cloud.
    pub points: usize,
    pub lr_init: f64,
    pub lr_floor: f64,
    pub lr_gamma: f64,
    /// Epochs per decay period of both schedules.
    pub decay_epochs: usize,
    pub bn_init: f64,
    pub bn_cap: f64,
    pub seed: u64,
    pub transform: TransformSpec,
    pub loss: LossConfig,
    /// Jitter both clouds of every pair.
    pub jitter: bool,
    pub objective: Objective,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pairs: 16,
            epochs: 30,
            points: 128,
            lr_init: 1e-3,
            lr_floor: 1e-5,
            lr_gamma: 0.7,
            decay_epochs: 20,
            bn_init: 0.5,
            bn_cap: 0.99,
            seed: 0,
            transform: TransformSpec::rotate(crate::transforms::Axis::Y, 180.0),
            loss: LossConfig::default(),
            jitter: true,
            objective: Objective::Cls,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.pairs < 2 {
            return bad(format!("pairs must be >= 2, got {}", self.pairs));
        }
        if self.points < 2 {
            return bad(format!("points must be >= 2, got {}", self.points));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_init) {
            return bad(format!("need 0 < lr_floor <= lr_init, got {} and {}", self.lr_floor, self.lr_init));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(format!("lr_gamma {} outside (0, 1]", self.lr_gamma));
        }
        if self.decay_epochs == 0 {
            return bad("decay_epochs must be >= 1".into());
        }
        if !(0.5..=1.0).contains(&self.bn_cap) || !(0.0..=self.bn_cap).contains(&self.bn_init) {
            return bad(format!("bn schedule init {} / cap {} invalid", self.bn_init, self.bn_cap));
        }
        self.transform.validate()?;
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples / self.pairs
    }

    /// Decay period in optimizer steps.
    pub fn period(&self, samples: usize) -> usize {
        (self.decay_epochs * self.steps_per_epoch(samples)).max(1)
    }
}

/// `max(floor, init · gamma^⌊step/period⌋)`
pub fn lr_schedule(step: usize, period: usize, cfg: &TrainConfig) -> f64 {
    let k = (step / period.max(1)) as i32;
    (cfg.lr_init * cfg.lr_gamma.powi(k)).max(cfg.lr_floor)
}

/// `min(cap, 1 − (1 − init) · 0.5^⌊step/period⌋)`
pub fn bn_schedule(step: usize, period: usize, cfg: &TrainConfig) -> f64 {
    let k = (step / period.max(1)) as i32;
    (1.0 - (1.0 - cfg.bn_init) * 0.5f64.powi(k)).min(cfg.bn_cap)
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// Updates `params` in place. Gradients are checked before anything is
    /// touched; a non-finite entry aborts with the parameter's name.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", g.data()[i])));
            }
        }
        self.t += 1;
        let (b1, b2): (T, T) = (lit(self.beta1), lit(self.beta2));
        let c1: T = lit(1.0 - self.beta1.powi(self.t as i32));
        let c2: T = lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps): (T, T) = (lit(lr), lit(self.eps));
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.write_u64::<LE>(self.t).unwrap();
        out.write_u32::<LE>(self.m.len() as u32).unwrap();
        for t in self.m.iter().chain(&self.v) {
            for x in t.data() {
                x.to_le_bytes_vec(out);
            }
        }
    }

    fn decode(&mut self, r: &mut Cursor<&[u8]>) -> Result<()> {
        self.t = r.read_u64::<LE>()?;
        let n = r.read_u32::<LE>()? as usize;
        if n != self.m.len() {
            return Err(Error::Checkpoint(format!("optimizer state for {n} tensors, model has {}", self.m.len())));
        }
        let width = T::DTYPE.size();
        let mut buf = vec![0u8; width];
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in t.data_mut() {
                r.read_exact(&mut buf)?;
                *x = T::from_le_slice(&buf);
            }
        }
        Ok(())
    }
}

/// Original / transformed clouds: rows `0..n` are originals, row `i + n` is
/// the transformed partner of row `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub clouds: Vec<PointCloud>,
    pub pairs: usize,
}

/// Pairs for the given dataset indices. For point-wise training the
/// original is reindexed through the transform's source map so that point
/// `i` of both clouds is the same underlying point.
pub fn build_batch_from(
    ds: &Dataset,
    ids: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    let jitter = TransformSpec::jitter();
    let mut originals = Vec::with_capacity(ids.len());
    let mut transformed = Vec::with_capacity(ids.len());
    for &i in ids {
        let p = sample_points(&ds.samples[i], cfg.points, rng);
        let (mut t, src) = apply_transform_indexed(&p, &cfg.transform, rng)?;
        let mut o = match cfg.objective {
            Objective::Seg => p.gather(&src),
            Objective::Cls => p,
        };
        if cfg.jitter {
            o = apply_transform_indexed(&o, &jitter, rng)?.0;
            t = apply_transform_indexed(&t, &jitter, rng)?.0;
        }
        originals.push(o);
        transformed.push(t);
    }
    originals.extend(transformed);
    Ok(PairBatch {
        clouds: originals,
        pairs: ids.len(),
    })
}

/// `n` distinct random samples paired up.
pub fn build_batch(ds: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<PairBatch> {
    if ds.samples.len() < cfg.pairs {
        return Err(Error::config(format!(
            "dataset has {} samples, fewer than {} pairs",
            ds.samples.len(),
            cfg.pairs
        )));
    }
    let ids = index::sample(rng, ds.samples.len(), cfg.pairs).into_vec();
    build_batch_from(ds, &ids, cfg, rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub bn_momentum: f64,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,epoch,lr,bn_momentum,loss\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.epoch, r.lr, r.bn_momentum, r.loss));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |m: &str| Error::Parse {
            location: format!("{}: line {}", path.display(), i + 1),
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        out.push(LossRecord {
            step: f[0].parse().map_err(|_| bad("bad step"))?,
            epoch: f[1].parse().map_err(|_| bad("bad epoch"))?,
            lr: num(f[2])?,
            bn_momentum: num(f[3])?,
            loss: num(f[4])?,
        });
    }
    Ok(out)
}

/// Everything that evolves during pretraining. Saving at an epoch boundary
/// and loading again continues exactly where the run left off.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub cfg: TrainConfig,
    pub adam: Adam<T>,
    rng: ChaCha8Rng,
    pub step: usize,
    pub epoch: usize,
    tape: Tape<T>,
}

fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.objective == Objective::Seg && model_cfg.seg_widths.is_none() {
            return Err(Error::config("point-wise objective needs segmentation widths"));
        }
        let model = Model::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        Ok(Self::with_model(model, cfg))
    }

    pub fn with_model(mut model: Model<T>, cfg: TrainConfig) -> Self {
        let shapes: Vec<Vec<usize>> = model.params_mut().iter().map(|(_, t)| t.shape().to_vec()).collect();
        Self {
            adam: Adam::new(shapes.iter().map(|s| s.as_slice())),
            rng: train_rng(cfg.seed),
            model,
            cfg,
            step: 0,
            epoch: 0,
            tape: Tape::new(),
        }
    }

    /// One optimizer step on `batch`; returns the loss.
    pub fn train_step(&mut self, batch: &PairBatch, lr: f64, bn_momentum: f64) -> Result<f64> {
        self.tape.reset();
        let bound = self.model.bind(&mut self.tape, true);
        let x = self.tape.constant(clouds_to_tensor(&batch.clouds)?);
        let n = batch.pairs;
        let mut pass = Pass::train(&mut self.tape, &mut self.rng);
        let enc = self.model.encode(&bound, x, &mut pass)?;
        let loss = match self.cfg.objective {
            Objective::Cls => {
                let z = self.model.project(&bound, enc.global, &mut pass)?;
                let zo = pass.tape.narrow(z, 0, n)?;
                let zt = pass.tape.narrow(z, n, n)?;
                contrastive_loss_cls(pass.tape, zo, zt, &self.cfg.loss)?
            }
            Objective::Seg => {
                let z = self.model.segment_embed(&bound, enc, &mut pass)?;
                let zo = pass.tape.narrow(z, 0, n)?;
                let zt = pass.tape.narrow(z, n, n)?;
                contrastive_loss_seg(pass.tape, zo, zt, &self.cfg.loss)?
            }
        };
        let stats = pass.take_stats();
        let value = self.tape.value(loss).item().to_f64_lossless();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {value} at step {}", self.step)));
        }
        self.tape.backward(loss)?;
        let grads: Vec<Tensor<T>> = bound
            .params
            .iter()
            .map(|&v| {
                self.tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)))
            })
            .collect();
        self.adam.step(&mut self.model.params_mut(), &grads, lr)?;
        self.model.commit_bn(&stats, bn_momentum)?;
        self.step += 1;
        Ok(value)
    }

    /// Shuffles the dataset and trains on every full batch once.
    pub fn run_epoch(&mut self, ds: &Dataset) -> Result<Vec<LossRecord>> {
        let steps = self.cfg.steps_per_epoch(ds.samples.len());
        if steps == 0 {
            return Err(Error::config(format!(
                "dataset has {} samples, fewer than {} pairs",
                ds.samples.len(),
                self.cfg.pairs
            )));
        }
        let period = self.cfg.period(ds.samples.len());
        let mut order: Vec<usize> = (0..ds.samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut records = Vec::with_capacity(steps);
        for chunk in order.chunks_exact(self.cfg.pairs) {
            let cfg = self.cfg.clone();
            let batch = build_batch_from(ds, chunk, &cfg, &mut self.rng)?;
            let lr = lr_schedule(self.step, period, &cfg);
            let bn = bn_schedule(self.step, period, &cfg);
            let step = self.step;
            let loss = self.train_step(&batch, lr, bn)?;
            records.push(LossRecord {
                step,
                epoch: self.epoch,
                lr,
                bn_momentum: bn,
                loss,
            });
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Runs until `cfg.epochs`, calling `on_epoch` after every epoch with the
    /// trainer and that epoch's records.
    pub fn run<F>(&mut self, ds: &Dataset, mut on_epoch: F) -> Result<Vec<LossRecord>>
    where
        F: FnMut(&Self, &[LossRecord]) -> Result<()>,
    {
        let mut all = Vec::new();
        while self.epoch < self.cfg.epochs {
            let records = self.run_epoch(ds)?;
            on_epoch(self, &records)?;
            all.extend(records);
        }
        Ok(all)
    }

    fn encode_state(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.write_u64::<LE>(self.epoch as u64).unwrap();
        out.write_u64::<LE>(self.step as u64).unwrap();
        out.extend_from_slice(&self.rng.get_seed());
        out.write_u64::<LE>(self.rng.get_stream()).unwrap();
        out.write_u128::<LE>(self.rng.get_word_pos()).unwrap();
        self.adam.encode(&mut out);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.model, Some(&self.encode_state()), path)
    }

    /// Restores a checkpoint written by [`Trainer::save`].
    pub fn resume(path: &Path, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, state) = load_checkpoint::<T>(path)?;
        let state = state.ok_or_else(|| Error::Checkpoint(format!("{}: no training state", path.display())))?;
        let mut t = Self::with_model(model, cfg);
        let mut r = Cursor::new(state.as_slice());
        let bad = |e: std::io::Error| Error::Checkpoint(format!("training state truncated: {e}"));
        t.epoch = r.read_u64::<LE>().map_err(bad)? as usize;
        t.step = r.read_u64::<LE>().map_err(bad)? as usize;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed).map_err(bad)?;
        let stream = r.read_u64::<LE>().map_err(bad)?;
        let word_pos = r.read_u128::<LE>().map_err(bad)?;
        t.rng = ChaCha8Rng::from_seed(seed);
        t.rng.set_stream(stream);
        t.rng.set_word_pos(word_pos);
        t.adam.decode(&mut r).map_err(|e| match e {
            Error::Io(io) => bad(io),
            other => other,
        })?;
        Ok(t)
    }
}

/// Pretrains from scratch, writing `checkpoint.pclm` (every
/// `checkpoint_every` epochs and at the end) and `loss.csv` under `out_dir`
/// when one is given. On a non-finite loss the last checkpoint is left as is.
pub fn pretrain<T: Scalar>(
    ds: &Dataset,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Model<T>, Vec<LossRecord>)> {
    let mut trainer = Trainer::<T>::new(model_cfg, cfg.clone())?;
    let curve = run_with_outputs(&mut trainer, ds, out_dir)?;
    Ok((trainer.model, curve))
}

pub fn run_with_outputs<T: Scalar>(
    trainer: &mut Trainer<T>,
    ds: &Dataset,
    out_dir: Option<&Path>,
) -> Result<Vec<LossRecord>> {
    let mut so_far: Vec<LossRecord> = match out_dir.map(|d| d.join("loss.csv")) {
        Some(p) if trainer.epoch > 0 && p.exists() => read_loss_csv(&p)?
            .into_iter()
            .filter(|r| r.epoch < trainer.epoch)
            .collect(),
        _ => Vec::new(),
    };
    let every = trainer.cfg.checkpoint_every;
    let total = trainer.cfg.epochs;
    let result = trainer.run(ds, |t, records| {
        so_far.extend_from_slice(records);
        if let Some(dir) = out_dir {
            write_loss_csv(&dir.join("loss.csv"), &so_far)?;
            if t.epoch == total || (every > 0 && t.epoch % every == 0) {
                t.save(&dir.join("checkpoint.pclm"))?;
            }
        }
        Ok(())
    });
    result?;
    if let (Some(dir), 0) = (out_dir, total) {
        write_loss_csv(&dir.join("loss.csv"), &so_far)?;
        trainer.save(&dir.join("checkpoint.pclm"))?;
    }
    Ok(so_far)
}
