//! Encoder, projection head, segmentation branch and linear probe.
//!
//! Parameters live in plain [`Tensor`]s owned by the model. A forward pass
//! first binds them onto a [`Tape`] as leaves ([`Model::bind`]); the bound
//! handles come back in declaration order so gradients can be matched to
//! parameters without names.

use std::hash::{DefaultHasher, Hasher};

use rand::{Rng, RngCore};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Shared per-point MLP widths; the last one is the global feature size.
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of the projection head.
    pub head_widths: Vec<usize>,
    pub d_z: usize,
    /// Hidden widths of the point-wise branch; `None` leaves it out.
    pub seg_widths: Option<Vec<usize>>,
    /// Drop probability inside the head during training.
    pub dropout: f64,
    /// L2-normalize head and branch outputs.
    pub normalize: bool,
}

impl ModelConfig {
    /// Full-size backbone.
    pub fn standard() -> Self {
        Self {
            encoder_widths: vec![64, 64, 64, 128, 1024],
            head_widths: vec![512, 256],
            d_z: 128,
            seg_widths: None,
            dropout: 0.3,
            normalize: true,
        }
    }

    /// Small widths that train in seconds on a CPU.
    pub fn desk() -> Self {
        Self {
            encoder_widths: vec![32, 64, 128],
            head_widths: vec![64],
            d_z: 128,
            seg_widths: None,
            dropout: 0.3,
            normalize: true,
        }
    }

    pub fn with_seg(mut self, widths: Vec<usize>) -> Self {
        self.seg_widths = Some(widths);
        self
    }

    pub fn global_dim(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    /// Width of the per-point features kept for the point-wise branch.
    pub fn mid_dim(&self) -> usize {
        let w = &self.encoder_widths;
        if w.len() >= 2 {
            w[w.len() - 2]
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::config("encoder widths must be non-empty and >= 1"));
        }
        if self.head_widths.contains(&0) {
            return Err(Error::config("head widths must be >= 1"));
        }
        if self.d_z < 2 {
            return Err(Error::config(format!("d_z must be >= 2, got {}", self.d_z)));
        }
        if let Some(seg) = &self.seg_widths {
            if seg.contains(&0) {
                return Err(Error::config("segmentation widths must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Whether a stored tensor is trained or is a running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Param,
    Buffer,
}

pub type Entry<'a, T> = (String, Slot, &'a Tensor<T>);
pub type EntryMut<'a, T> = (String, Slot, &'a mut Tensor<T>);

fn xavier<T: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[din, dout]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            weight: xavier(din, dout, rng),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn zeros(din: usize, dout: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[din, dout]),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }

    fn bind(&self, tape: &mut Tape<T>, rg: bool, order: &mut Vec<Var>) -> BoundLinear {
        let weight = tape.leaf(self.weight.clone(), rg);
        let bias = tape.leaf(self.bias.clone(), rg);
        order.extend([weight, bias]);
        BoundLinear { weight, bias }
    }

    fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<Entry<'a, T>>) {
        out.push((format!("{prefix}.weight"), Slot::Param, &self.weight));
        out.push((format!("{prefix}.bias"), Slot::Param, &self.bias));
    }

    fn entries_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<EntryMut<'a, T>>) {
        out.push((format!("{prefix}.weight"), Slot::Param, &mut self.weight));
        out.push((format!("{prefix}.bias"), Slot::Param, &mut self.bias));
    }
}

/// Linear → batch norm → ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayer<T> {
    pub linear: Linear<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMlpLayer {
    pub linear: BoundLinear,
    pub gamma: Var,
    pub beta: Var,
}

impl<T: Scalar> MlpLayer<T> {
    pub fn init<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::init(din, dout, rng),
            gamma: Tensor::full(&[dout], T::one()),
            beta: Tensor::zeros(&[dout]),
            running_mean: Tensor::zeros(&[dout]),
            running_var: Tensor::full(&[dout], T::one()),
        }
    }

    fn bind(&self, tape: &mut Tape<T>, rg: bool, order: &mut Vec<Var>) -> BoundMlpLayer {
        let linear = self.linear.bind(tape, rg, order);
        let gamma = tape.leaf(self.gamma.clone(), rg);
        let beta = tape.leaf(self.beta.clone(), rg);
        order.extend([gamma, beta]);
        BoundMlpLayer { linear, gamma, beta }
    }

    fn forward(&self, bound: &BoundMlpLayer, x: Var, pass: &mut Pass<'_, T>) -> Result<Var> {
        let h = pass.tape.linear(x, bound.linear.weight, bound.linear.bias)?;
        let h = if pass.train {
            let (h, stats) = pass.tape.batch_norm_train(h, bound.gamma, bound.beta)?;
            pass.stats.push(stats);
            h
        } else {
            pass.tape.batch_norm_eval(
                h,
                bound.gamma,
                bound.beta,
                self.running_mean.data(),
                self.running_var.data(),
            )?
        };
        Ok(pass.tape.relu(h))
    }

    /// `running ← m·running + (1 − m)·batch`
    fn commit(&mut self, stats: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = momentum * *r + keep * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = momentum * *r + keep * b;
        }
    }

    fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<Entry<'a, T>>) {
        self.linear.entries(prefix, out);
        out.push((format!("{prefix}.bn.gamma"), Slot::Param, &self.gamma));
        out.push((format!("{prefix}.bn.beta"), Slot::Param, &self.beta));
        out.push((format!("{prefix}.bn.running_mean"), Slot::Buffer, &self.running_mean));
        out.push((format!("{prefix}.bn.running_var"), Slot::Buffer, &self.running_var));
    }

    fn entries_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<EntryMut<'a, T>>) {
        self.linear.entries_mut(prefix, out);
        out.push((format!("{prefix}.bn.gamma"), Slot::Param, &mut self.gamma));
        out.push((format!("{prefix}.bn.beta"), Slot::Param, &mut self.beta));
        out.push((format!("{prefix}.bn.running_mean"), Slot::Buffer, &mut self.running_mean));
        out.push((format!("{prefix}.bn.running_var"), Slot::Buffer, &mut self.running_var));
    }
}

/// State of one forward pass: the tape, train/eval mode, the dropout rng and
/// the batch statistics measured by training-mode batch norms, in layer order.
pub struct Pass<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub train: bool,
    rng: Option<&'a mut dyn RngCore>,
    stats: Vec<BatchStats<T>>,
}

impl<'a, T: Scalar> Pass<'a, T> {
    pub fn train(tape: &'a mut Tape<T>, rng: &'a mut dyn RngCore) -> Self {
        Self {
            tape,
            train: true,
            rng: Some(rng),
            stats: Vec::new(),
        }
    }

    pub fn eval(tape: &'a mut Tape<T>) -> Self {
        Self {
            tape,
            train: false,
            rng: None,
            stats: Vec::new(),
        }
    }

    /// Batch statistics collected so far, to be handed to [`Model::commit_bn`].
    pub fn take_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.stats)
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Contract("training pass without an rng".into()))?;
        self.tape.dropout(x, rate, true, rng)
    }
}

/// Shared per-point MLP followed by max pooling. No input transform net.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub layers: Vec<MlpLayer<T>>,
}

/// Fully connected layers with ReLU and dropout between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub hidden: Vec<Linear<T>>,
    pub out: Linear<T>,
    pub dropout: f64,
    pub normalize: bool,
}

/// Per-point MLP over `[per-point feature ∥ global feature]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBranch<T> {
    pub hidden: Vec<MlpLayer<T>>,
    pub out: Linear<T>,
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub head: Head<T>,
    pub seg: Option<SegBranch<T>>,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    encoder: Vec<BoundMlpLayer>,
    head_hidden: Vec<BoundLinear>,
    head_out: BoundLinear,
    seg_hidden: Vec<BoundMlpLayer>,
    seg_out: Option<BoundLinear>,
    /// Trainable leaves in declaration order.
    pub params: Vec<Var>,
}

/// Outputs of [`Model::encode`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, D_g]`
    pub global: Var,
    /// `[B, N, D_mid]`
    pub per_point: Var,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut din = 3;
        let mut layers = Vec::new();
        for &w in &config.encoder_widths {
            layers.push(MlpLayer::init(din, w, rng));
            din = w;
        }
        let head = Head::init(config.global_dim(), &config.head_widths, config.d_z, &config, rng);
        let seg = config.seg_widths.as_ref().map(|widths| {
            let mut din = config.mid_dim() + config.global_dim();
            let mut hidden = Vec::new();
            for &w in widths {
                hidden.push(MlpLayer::init(din, w, rng));
                din = w;
            }
            SegBranch {
                hidden,
                out: Linear::init(din, config.d_z, rng),
                normalize: config.normalize,
            }
        });
        Ok(Self {
            config,
            encoder: Encoder { layers },
            head,
            seg,
        })
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundModel {
        let mut params = Vec::new();
        let encoder = self
            .encoder
            .layers
            .iter()
            .map(|l| l.bind(tape, requires_grad, &mut params))
            .collect();
        let head_hidden = self
            .head
            .hidden
            .iter()
            .map(|l| l.bind(tape, requires_grad, &mut params))
            .collect();
        let head_out = self.head.out.bind(tape, requires_grad, &mut params);
        let (seg_hidden, seg_out) = match &self.seg {
            Some(s) => {
                let hidden = s
                    .hidden
                    .iter()
                    .map(|l| l.bind(tape, requires_grad, &mut params))
                    .collect();
                (hidden, Some(s.out.bind(tape, requires_grad, &mut params)))
            }
            None => (Vec::new(), None),
        };
        BoundModel {
            encoder,
            head_hidden,
            head_out,
            seg_hidden,
            seg_out,
            params,
        }
    }

    /// `x: [B, N, 3]` → global feature and the per-point features of the
    /// second-to-last layer.
    pub fn encode(&self, bound: &BoundModel, x: Var, pass: &mut Pass<'_, T>) -> Result<Encoded> {
        let shape = pass.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Shape {
                op: "encode",
                lhs: shape,
                rhs: vec![3],
            });
        }
        let mut h = x;
        let mut per_point = x;
        let last = self.encoder.layers.len() - 1;
        for (i, (layer, b)) in self.encoder.layers.iter().zip(&bound.encoder).enumerate() {
            h = layer.forward(b, h, pass)?;
            if i + 1 == last {
                per_point = h;
            }
        }
        let global = pass.tape.max_pool_points(h)?;
        Ok(Encoded { global, per_point })
    }

    /// Head embedding `[B, d_z]` of the global feature.
    pub fn project(&self, bound: &BoundModel, global: Var, pass: &mut Pass<'_, T>) -> Result<Var> {
        self.head.forward(&bound.head_hidden, &bound.head_out, global, pass)
    }

    /// Per-point embeddings `[B, N, d_z]`.
    pub fn segment_embed(&self, bound: &BoundModel, enc: Encoded, pass: &mut Pass<'_, T>) -> Result<Var> {
        let (seg, out) = match (&self.seg, &bound.seg_out) {
            (Some(s), Some(o)) => (s, o),
            _ => return Err(Error::config("model has no segmentation branch")),
        };
        let mut h = pass.tape.concat_broadcast(enc.per_point, enc.global)?;
        for (layer, b) in seg.hidden.iter().zip(&bound.seg_hidden) {
            h = layer.forward(b, h, pass)?;
        }
        let z = pass.tape.linear(h, out.weight, out.bias)?;
        Ok(if seg.normalize {
            pass.tape.l2_normalize(z)
        } else {
            z
        })
    }

    /// Folds the statistics of a training pass into the running averages.
    /// Encoder layers come first, then branch layers if the pass used them.
    pub fn commit_bn(&mut self, stats: &[BatchStats<T>], momentum: f64) -> Result<()> {
        let m: T = lit(momentum);
        let n_enc = self.encoder.layers.len();
        let n_seg = self.seg.as_ref().map_or(0, |s| s.hidden.len());
        if stats.len() != n_enc && stats.len() != n_enc + n_seg {
            return Err(Error::Contract(format!(
                "{} batch-norm statistics for {n_enc} encoder + {n_seg} branch layers",
                stats.len()
            )));
        }
        for (layer, s) in self.encoder.layers.iter_mut().zip(stats) {
            layer.commit(s, m);
        }
        if stats.len() > n_enc {
            if let Some(seg) = &mut self.seg {
                for (layer, s) in seg.hidden.iter_mut().zip(&stats[n_enc..]) {
                    layer.commit(s, m);
                }
            }
        }
        Ok(())
    }

    /// Every stored tensor with its name, in declaration order.
    pub fn entries(&self) -> Vec<Entry<'_, T>> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter().enumerate() {
            l.entries(&format!("encoder.{i}"), &mut out);
        }
        self.head.entries("head", &mut out);
        if let Some(seg) = &self.seg {
            for (i, l) in seg.hidden.iter().enumerate() {
                l.entries(&format!("seg.{i}"), &mut out);
            }
            seg.out.entries("seg.out", &mut out);
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<EntryMut<'_, T>> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.layers.iter_mut().enumerate() {
            l.entries_mut(&format!("encoder.{i}"), &mut out);
        }
        self.head.entries_mut("head", &mut out);
        if let Some(seg) = &mut self.seg {
            for (i, l) in seg.hidden.iter_mut().enumerate() {
                l.entries_mut(&format!("seg.{i}"), &mut out);
            }
            seg.out.entries_mut("seg.out", &mut out);
        }
        out
    }

    /// Trainable tensors in the order of [`BoundModel::params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.entries_mut()
            .into_iter()
            .filter(|e| e.1 == Slot::Param)
            .map(|(n, _, t)| (n, t))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.entries()
            .iter()
            .filter(|e| e.1 == Slot::Param)
            .map(|e| e.2.numel())
            .sum()
    }

    /// Hash of every stored bit, for detecting unintended mutation.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, _, t) in self.entries() {
            h.write(name.as_bytes());
            for v in t.data() {
                h.write_u64(v.bits());
            }
        }
        h.finish()
    }

    /// Eval-mode global features, one row per cloud.
    pub fn global_features(&self, clouds: &[PointCloud]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(clouds_to_tensor(clouds)?);
        let mut pass = Pass::eval(&mut tape);
        let enc = self.encode(&bound, x, &mut pass)?;
        Ok(tape.value(enc.global).clone())
    }

    /// Eval-mode head embeddings.
    pub fn head_features(&self, clouds: &[PointCloud]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(clouds_to_tensor(clouds)?);
        let mut pass = Pass::eval(&mut tape);
        let enc = self.encode(&bound, x, &mut pass)?;
        let z = self.project(&bound, enc.global, &mut pass)?;
        Ok(tape.value(z).clone())
    }

    /// Eval-mode per-point features `[B, N, D]`: either the encoder's
    /// `[per-point ∥ global]` concatenation or the branch embedding.
    pub fn point_features(&self, clouds: &[PointCloud], branch: bool) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(clouds_to_tensor(clouds)?);
        let mut pass = Pass::eval(&mut tape);
        let enc = self.encode(&bound, x, &mut pass)?;
        let out = if branch {
            self.segment_embed(&bound, enc, &mut pass)?
        } else {
            pass.tape.concat_broadcast(enc.per_point, enc.global)?
        };
        Ok(tape.value(out).clone())
    }
}

impl<T: Scalar> Head<T> {
    pub fn init<R: Rng + ?Sized>(
        din: usize,
        widths: &[usize],
        dout: usize,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let mut d = din;
        let mut hidden = Vec::new();
        for &w in widths {
            hidden.push(Linear::init(d, w, rng));
            d = w;
        }
        Self {
            hidden,
            out: Linear::init(d, dout, rng),
            dropout: config.dropout,
            normalize: config.normalize,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, rg: bool, order: &mut Vec<Var>) -> (Vec<BoundLinear>, BoundLinear) {
        let hidden = self.hidden.iter().map(|l| l.bind(tape, rg, order)).collect();
        (hidden, self.out.bind(tape, rg, order))
    }

    pub fn forward(
        &self,
        hidden: &[BoundLinear],
        out: &BoundLinear,
        x: Var,
        pass: &mut Pass<'_, T>,
    ) -> Result<Var> {
        let mut h = x;
        for b in hidden {
            h = pass.tape.linear(h, b.weight, b.bias)?;
            h = pass.tape.relu(h);
            h = pass.dropout(h, self.dropout)?;
        }
        let z = pass.tape.linear(h, out.weight, out.bias)?;
        Ok(if self.normalize {
            pass.tape.l2_normalize(z)
        } else {
            z
        })
    }

    fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<Entry<'a, T>>) {
        for (i, l) in self.hidden.iter().enumerate() {
            l.entries(&format!("{prefix}.{i}"), out);
        }
        self.out.entries(&format!("{prefix}.out"), out);
    }

    fn entries_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<EntryMut<'a, T>>) {
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.entries_mut(&format!("{prefix}.{i}"), out);
        }
        self.out.entries_mut(&format!("{prefix}.out"), out);
    }
}

/// Single affine map from frozen features to class (or part) logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe<T> {
    pub linear: Linear<T>,
}

impl<T: Scalar> Probe<T> {
    /// Zero weights: every class starts equally likely.
    pub fn new(din: usize, classes: usize) -> Self {
        Self {
            linear: Linear::zeros(din, classes),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, rg: bool) -> BoundLinear {
        self.linear.bind(tape, rg, &mut Vec::new())
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundLinear, features: Var) -> Result<Var> {
        tape.linear(features, bound.weight, bound.bias)
    }

    /// Logits for a `[rows, din]` feature matrix.
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, &b, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("probe.weight".into(), &mut self.linear.weight),
            ("probe.bias".into(), &mut self.linear.bias),
        ]
    }
}

/// Stacks equally sized clouds into `[B, N, 3]`.
pub fn clouds_to_tensor<T: Scalar>(clouds: &[PointCloud]) -> Result<Tensor<T>> {
    let n = clouds.first().ok_or(Error::EmptyCloud)?.len();
    let mut data = Vec::with_capacity(clouds.len() * n * 3);
    for c in clouds {
        if c.len() != n {
            return Err(Error::Shape {
                op: "batch clouds",
                lhs: vec![n],
                rhs: vec![c.len()],
            });
        }
        c.validate()?;
        data.extend(c.points.iter().flatten().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![clouds.len(), n, 3], data)
}
