//! Linear probe, finetuning, segmentation and ablation protocols, and the
//! metrics they report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::transfer_weights;
use crate::cloud::{sample_points, PointCloud};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::{clouds_to_tensor, Model, ModelConfig, Pass, Probe};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{bn_schedule, lr_schedule, pretrain, Adam, TrainConfig};
use crate::transforms::{apply_transform, TransformSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRow {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

impl ClassRow {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Which arm of a comparison produced this record.
    pub tag: String,
    pub overall_accuracy: f64,
    pub mean_class_accuracy: f64,
    pub instance_miou: Option<f64>,
    pub class_miou: Option<f64>,
    pub per_class: Vec<ClassRow>,
}

/// Accuracy over `(gt, pred)` pairs. Mean class accuracy averages the
/// classes that occur in `gt`.
pub fn classification_metrics(tag: &str, gt: &[usize], pred: &[usize], num_classes: usize) -> Metrics {
    let mut rows: Vec<ClassRow> = (0..num_classes)
        .map(|class| ClassRow {
            class,
            correct: 0,
            total: 0,
        })
        .collect();
    let mut correct = 0;
    for (&g, &p) in gt.iter().zip(pred) {
        if g >= rows.len() {
            rows.resize_with(g + 1, || ClassRow {
                class: 0,
                correct: 0,
                total: 0,
            });
        }
        rows[g].class = g;
        rows[g].total += 1;
        if g == p {
            rows[g].correct += 1;
            correct += 1;
        }
    }
    let present: Vec<&ClassRow> = rows.iter().filter(|r| r.total > 0).collect();
    let mean_class = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|r| r.accuracy()).sum::<f64>() / present.len() as f64
    };
    Metrics {
        tag: tag.to_string(),
        overall_accuracy: if gt.is_empty() { 0.0 } else { correct as f64 / gt.len() as f64 },
        mean_class_accuracy: mean_class,
        instance_miou: None,
        class_miou: None,
        per_class: rows,
    }
}

/// Mean IoU of one shape over the parts of its category. A part missing
/// from both prediction and ground truth counts as IoU 1.
pub fn shape_miou(pred: &[u16], gt: &[u16], parts: &[u16]) -> f64 {
    if parts.is_empty() {
        return 1.0;
    }
    let total: f64 = parts
        .iter()
        .map(|&part| {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&p, &g) in pred.iter().zip(gt) {
                let (a, b) = (p == part, g == part);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    total / parts.len() as f64
}

/// One evaluated shape for segmentation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeResult {
    pub id: u32,
    pub category: u16,
    pub pred: Vec<u16>,
    pub gt: Vec<u16>,
}

/// `(instance mIoU, class mIoU, point accuracy)`.
pub fn segmentation_scores(shapes: &[ShapeResult], part_sets: &BTreeMap<u16, Vec<u16>>) -> (f64, f64, f64) {
    let mut per_category: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::with_capacity(shapes.len());
    let (mut hit, mut points) = (0usize, 0usize);
    for s in shapes {
        let parts = part_sets.get(&s.category).map(Vec::as_slice).unwrap_or(&[]);
        let m = shape_miou(&s.pred, &s.gt, parts);
        per_category.entry(s.category).or_default().push(m);
        all.push(m);
        hit += s.pred.iter().zip(&s.gt).filter(|(p, g)| p == g).count();
        points += s.gt.len();
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let class: Vec<f64> = per_category.values().map(|v| mean(v)).collect();
    let acc = if points == 0 { 0.0 } else { hit as f64 / points as f64 };
    (mean(&all), mean(&class), acc)
}

/// Part labels seen per category across the given datasets.
pub fn part_sets(datasets: &[&Dataset]) -> Result<BTreeMap<u16, Vec<u16>>> {
    let mut sets: BTreeMap<u16, BTreeSet<u16>> = BTreeMap::new();
    for ds in datasets {
        for s in &ds.samples {
            let (Some(c), Some(labels)) = (s.class_label, &s.point_labels) else {
                return Err(Error::config(format!(
                    "{}: sample {} lacks a category or point labels",
                    ds.name, s.id
                )));
            };
            sets.entry(c).or_default().extend(labels.iter().copied());
        }
    }
    Ok(sets.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect())
}

/// Per-sample classification output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub id: u32,
    pub gt: usize,
    pub pred: usize,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::from("id,gt,pred\n");
    for p in preds {
        writeln!(out, "{},{},{}", p.id, p.gt, p.pred).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            let bad = || Error::Parse {
                location: format!("{}: line {}", path.display(), i + 1),
                message: format!("expected id,gt,pred, got {line:?}"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(Prediction {
                id: f[0].parse().map_err(|_| bad())?,
                gt: f[1].parse().map_err(|_| bad())?,
                pred: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Which representation a probe is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Global feature of the encoder (or `[per-point ∥ global]` per point).
    Encoder,
    /// Projection head output (or the point-wise branch per point).
    Head,
}

impl FeatureSource {
    pub fn tag(self) -> &'static str {
        match self {
            FeatureSource::Encoder => "encoder",
            FeatureSource::Head => "head",
        }
    }
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(FeatureSource::Encoder),
            "head" => Ok(FeatureSource::Head),
            other => Err(Error::config(format!("unknown feature source {other:?} (encoder or head)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Points sampled from every cloud before feature extraction.
    pub points: usize,
    pub seed: u64,
    /// Z-score features with training-set statistics before fitting.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            points: 128,
            seed: 0,
            standardize: false,
        }
    }
}

const FEATURE_CHUNK: usize = 32;

fn resample(ds: &Dataset, points: usize, seed: u64) -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ds.samples.iter().map(|s| sample_points(s, points, &mut rng)).collect()
}

/// Eval-mode cloud features `[samples, D]`, computed in parallel chunks.
pub fn extract_features<T: Scalar>(
    model: &Model<T>,
    clouds: &[PointCloud],
    source: FeatureSource,
) -> Result<Tensor<T>> {
    let parts = clouds
        .par_chunks(FEATURE_CHUNK)
        .map(|chunk| match source {
            FeatureSource::Encoder => model.global_features(chunk),
            FeatureSource::Head => model.head_features(chunk),
        })
        .collect::<Result<Vec<_>>>()?;
    stack_rows(parts)
}

/// Eval-mode point features `[samples · N, D]`.
pub fn extract_point_features<T: Scalar>(
    model: &Model<T>,
    clouds: &[PointCloud],
    source: FeatureSource,
) -> Result<Tensor<T>> {
    let parts = clouds
        .par_chunks(FEATURE_CHUNK)
        .map(|chunk| {
            let t = model.point_features(chunk, source == FeatureSource::Head)?;
            let d = t.shape()[2];
            t.reshaped(&[chunk.len() * chunk[0].len(), d])
        })
        .collect::<Result<Vec<_>>>()?;
    stack_rows(parts)
}

fn stack_rows<T: Scalar>(parts: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let d = parts.first().map_or(0, |t| t.shape()[1]);
    let rows: usize = parts.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(rows * d);
    for t in parts {
        data.extend(t.into_data());
    }
    Tensor::new(vec![rows, d], data)
}

/// Column means and standard deviations of a `[rows, D]` matrix.
fn column_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let d = x.shape()[1];
    let rows = x.shape()[0].max(1) as f64;
    let mut mean = vec![0.0; d];
    for r in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v.to_f64_lossless();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; d];
    for r in x.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v.to_f64_lossless() - m).powi(2);
        }
    }
    let std = var.iter().map(|s| (s / rows).sqrt().max(1e-8)).collect();
    (mean, std)
}

fn apply_stats<T: Scalar>(x: &Tensor<T>, mean: &[f64], std: &[f64]) -> Tensor<T> {
    let d = mean.len();
    let data = x
        .data()
        .chunks(d)
        .flat_map(|r| {
            r.iter()
                .zip(mean.iter().zip(std))
                .map(|(v, (m, s))| T::from_f64_lossy((v.to_f64_lossless() - m) / s))
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// A fitted probe together with the feature scaling it expects.
#[derive(Clone, Debug)]
pub struct FittedProbe<T> {
    pub probe: Probe<T>,
    scaling: Option<(Vec<f64>, Vec<f64>)>,
}

impl<T: Scalar> FittedProbe<T> {
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.scaling {
            Some((m, s)) => self.probe.logits(&apply_stats(features, m, s)),
            None => self.probe.logits(features),
        }
    }
}

/// Full-batch softmax regression from zero initialization.
pub fn fit_probe<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<FittedProbe<T>> {
    if features.shape().len() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::Shape {
            op: "fit_probe",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::config("probe training set is empty"));
    }
    let scaling = cfg.standardize.then(|| column_stats(features));
    let x_train = match &scaling {
        Some((m, s)) => apply_stats(features, m, s),
        None => features.clone(),
    };
    let mut probe = Probe::<T>::new(features.shape()[1], classes);
    let shapes = [probe.linear.weight.shape().to_vec(), probe.linear.bias.shape().to_vec()];
    let mut adam = Adam::<T>::new(shapes.iter().map(|s| s.as_slice()));
    let mut tape = Tape::new();
    for _ in 0..cfg.epochs {
        tape.reset();
        let b = probe.bind(&mut tape, true);
        let x = tape.constant(x_train.clone());
        let logits = probe.forward(&mut tape, &b, x)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        tape.backward(loss)?;
        let grads = [tape.grad(b.weight).unwrap().clone(), tape.grad(b.bias).unwrap().clone()];
        adam.step(&mut probe.params_mut(), &grads, cfg.lr)?;
    }
    Ok(FittedProbe { probe, scaling })
}

fn argmax<T: Scalar>(row: &[T], allowed: Option<&[u16]>) -> usize {
    let candidates: Box<dyn Iterator<Item = usize>> = match allowed {
        Some(a) if !a.is_empty() => Box::new(a.iter().map(|&p| p as usize).filter(|&p| p < row.len())),
        _ => Box::new(0..row.len()),
    };
    let mut best = (usize::MAX, T::neg_infinity());
    for i in candidates {
        if best.0 == usize::MAX || row[i] > best.1 {
            best = (i, row[i]);
        }
    }
    best.0
}

fn check_labels(train: &Dataset, test: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    if train.samples.is_empty() {
        return Err(Error::config(format!("{}: probe training set is empty", train.name)));
    }
    if train.num_classes != test.num_classes {
        return Err(Error::config(format!(
            "class count mismatch: {} has {}, {} has {}",
            train.name, train.num_classes, test.name, test.num_classes
        )));
    }
    Ok((train.class_labels()?, test.class_labels()?))
}

/// Probe on frozen features; the model is never modified.
pub fn linear_probe_eval<T: Scalar>(
    model: &Model<T>,
    train: &Dataset,
    test: &Dataset,
    source: FeatureSource,
    cfg: &ProbeConfig,
) -> Result<(Metrics, Vec<Prediction>)> {
    let (y_train, y_test) = check_labels(train, test)?;
    let k = train.num_classes as usize;
    let f_train = extract_features(model, &resample(train, cfg.points, cfg.seed), source)?;
    let f_test = extract_features(model, &resample(test, cfg.points, cfg.seed ^ 1), source)?;
    let probe = fit_probe(&f_train, &y_train, k, cfg)?;
    let logits = probe.logits(&f_test)?;
    let preds: Vec<Prediction> = test
        .samples
        .iter()
        .zip(&y_test)
        .enumerate()
        .map(|(i, (s, &gt))| Prediction {
            id: s.id,
            gt,
            pred: argmax(logits.row(i), None),
        })
        .collect();
    let pred: Vec<usize> = preds.iter().map(|p| p.pred).collect();
    Ok((classification_metrics(source.tag(), &y_test, &pred, k), preds))
}

/// Supervised training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub points: usize,
    pub lr_init: f64,
    pub seed: u64,
    /// Schedules (decay period, floors) shared with pretraining.
    pub schedule: TrainConfig,
    pub jitter: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 32,
            points: 128,
            lr_init: 1e-3,
            seed: 0,
            schedule: TrainConfig::default(),
            jitter: true,
        }
    }
}

/// Encoder plus a fresh classification head of the same hidden widths.
pub fn classifier_config(base: &ModelConfig, classes: usize) -> ModelConfig {
    ModelConfig {
        d_z: classes,
        seg_widths: None,
        normalize: false,
        ..base.clone()
    }
}

/// Supervised training of a classifier whose encoder comes from
/// `pretrained` (random when `None`). With `head_init` the hidden head
/// layers are copied as well; the output layer is always fresh.
pub fn finetune_eval<T: Scalar>(
    pretrained: Option<&Model<T>>,
    base: &ModelConfig,
    head_init: bool,
    train: &Dataset,
    test: &Dataset,
    cfg: &FinetuneConfig,
    tag: &str,
) -> Result<(Metrics, Vec<Prediction>)> {
    let (y_train, y_test) = check_labels(train, test)?;
    let k = train.num_classes as usize;
    if cfg.batch < 2 {
        return Err(Error::config("finetune batch must be >= 2"));
    }
    let mut model = Model::<T>::new(classifier_config(base, k), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if let Some(src) = pretrained {
        transfer_weights(src, &mut model, head_init)?;
    }
    let shapes: Vec<Vec<usize>> = model.params_mut().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut adam = Adam::<T>::new(shapes.iter().map(|s| s.as_slice()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let steps_per_epoch = train.samples.len() / cfg.batch;
    let period = (cfg.schedule.decay_epochs * steps_per_epoch).max(1);
    let sched = TrainConfig {
        lr_init: cfg.lr_init,
        ..cfg.schedule.clone()
    };
    let jitter = TransformSpec::jitter();
    let mut tape = Tape::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks_exact(cfg.batch) {
            let mut clouds = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let c = sample_points(&train.samples[i], cfg.points, &mut rng);
                clouds.push(if cfg.jitter { apply_transform(&c, &jitter, &mut rng)? } else { c });
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            tape.reset();
            let bound = model.bind(&mut tape, true);
            let x = tape.constant(clouds_to_tensor(&clouds)?);
            let mut pass = Pass::train(&mut tape, &mut rng);
            let enc = model.encode(&bound, x, &mut pass)?;
            let logits = model.project(&bound, enc.global, &mut pass)?;
            let stats = pass.take_stats();
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("finetune loss is {value} at step {step}")));
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor<T>> = bound
                .params
                .iter()
                .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
                .collect();
            adam.step(&mut model.params_mut(), &grads, lr_schedule(step, period, &sched))?;
            model.commit_bn(&stats, bn_schedule(step, period, &sched))?;
            step += 1;
        }
    }
    let clouds = resample(test, cfg.points, cfg.seed ^ 1);
    let logits = extract_features(&model, &clouds, FeatureSource::Head)?;
    let preds: Vec<Prediction> = test
        .samples
        .iter()
        .zip(&y_test)
        .enumerate()
        .map(|(i, (s, &gt))| Prediction {
            id: s.id,
            gt,
            pred: argmax(logits.row(i), None),
        })
        .collect();
    let pred: Vec<usize> = preds.iter().map(|p| p.pred).collect();
    Ok((classification_metrics(tag, &y_test, &pred, k), preds))
}

/// Pretrains on `unsup`, then probes on another labeled pair of datasets.
pub fn cross_validate<T: Scalar>(
    unsup: &Dataset,
    probe_train: &Dataset,
    probe_test: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    probe_cfg: &ProbeConfig,
) -> Result<Metrics> {
    if probe_train.samples.is_empty() {
        return Err(Error::config(format!("{}: probe training set is empty", probe_train.name)));
    }
    let (model, _) = pretrain::<T>(unsup, model_cfg.clone(), train_cfg, None)?;
    let (mut m, _) = linear_probe_eval(&model, probe_train, probe_test, FeatureSource::Encoder, probe_cfg)?;
    m.tag = format!("{}->{}", unsup.name, probe_train.name);
    Ok(m)
}

/// Per-point probe onto part labels, with predictions restricted to the
/// parts of each shape's category.
pub fn segmentation_eval<T: Scalar>(
    model: &Model<T>,
    train: &Dataset,
    test: &Dataset,
    source: FeatureSource,
    cfg: &ProbeConfig,
) -> Result<(Metrics, Vec<ShapeResult>)> {
    let sets = part_sets(&[train, test])?;
    if train.samples.is_empty() {
        return Err(Error::config(format!("{}: probe training set is empty", train.name)));
    }
    let parts = train.num_parts.max(test.num_parts) as usize;
    let clouds_train = resample(train, cfg.points, cfg.seed);
    let clouds_test = resample(test, cfg.points, cfg.seed ^ 1);
    let f_train = extract_point_features(model, &clouds_train, source)?;
    let f_test = extract_point_features(model, &clouds_test, source)?;
    let y_train: Vec<usize> = clouds_train
        .iter()
        .flat_map(|c| c.point_labels.as_ref().unwrap().iter().map(|&l| l as usize))
        .collect();
    let probe = fit_probe(&f_train, &y_train, parts, cfg)?;
    let logits = probe.logits(&f_test)?;
    let mut row = 0;
    let shapes: Vec<ShapeResult> = clouds_test
        .iter()
        .map(|c| {
            let category = c.class_label.unwrap();
            let allowed = sets.get(&category).map(Vec::as_slice);
            let pred = (0..c.len())
                .map(|j| argmax(logits.row(row + j), allowed) as u16)
                .collect();
            row += c.len();
            ShapeResult {
                id: c.id,
                category,
                pred,
                gt: c.point_labels.clone().unwrap(),
            }
        })
        .collect();
    let (inst, class, acc) = segmentation_scores(&shapes, &sets);
    let gt: Vec<usize> = shapes.iter().flat_map(|s| s.gt.iter().map(|&g| g as usize)).collect();
    let pred: Vec<usize> = shapes.iter().flat_map(|s| s.pred.iter().map(|&p| p as usize)).collect();
    let mut m = classification_metrics(source.tag(), &gt, &pred, parts);
    m.overall_accuracy = acc;
    m.instance_miou = Some(inst);
    m.class_miou = Some(class);
    Ok((m, shapes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub transform: String,
    pub mean_class_accuracy: f64,
    pub overall_accuracy: f64,
}

/// Pretrains once per transform with the same seed, probes each result and
/// returns rows sorted by overall accuracy (best first). `on_row` sees rows
/// as they finish.
pub fn ablate_transforms<T: Scalar>(
    train: &Dataset,
    test: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    probe_cfg: &ProbeConfig,
    specs: &[TransformSpec],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if specs.is_empty() {
        return Err(Error::config("ablation needs at least one transform"));
    }
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let cfg = TrainConfig {
            transform: spec.clone(),
            ..train_cfg.clone()
        };
        let (model, _) = pretrain::<T>(train, model_cfg.clone(), &cfg, None)?;
        let (m, _) = linear_probe_eval(&model, train, test, FeatureSource::Encoder, probe_cfg)?;
        let row = AblationRow {
            transform: spec.to_string(),
            mean_class_accuracy: m.mean_class_accuracy,
            overall_accuracy: m.overall_accuracy,
        };
        on_row(&row);
        rows.push(row);
    }
    rows.sort_by(|a, b| b.overall_accuracy.total_cmp(&a.overall_accuracy));
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

pub fn metrics_csv(records: &[Metrics]) -> String {
    let mut out = String::from("tag,overall_accuracy,mean_class_accuracy,instance_miou,class_miou\n");
    for m in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            m.tag,
            m.overall_accuracy,
            m.mean_class_accuracy,
            opt(m.instance_miou),
            opt(m.class_miou)
        )
        .unwrap();
    }
    out
}

/// Column-aligned table of metric records, percentages with two decimals.
pub fn metrics_table(records: &[Metrics]) -> String {
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let mut rows = vec![vec![
        "tag".to_string(),
        "overall_acc".into(),
        "mean_class_acc".into(),
        "instance_miou".into(),
        "class_miou".into(),
    ]];
    for m in records {
        rows.push(vec![
            m.tag.clone(),
            pct(m.overall_accuracy),
            pct(m.mean_class_accuracy),
            m.instance_miou.map_or("-".into(), pct),
            m.class_miou.map_or("-".into(), pct),
        ]);
    }
    align(&rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("rank,transform,mean_class_accuracy,overall_accuracy\n");
    for (i, r) in rows.iter().enumerate() {
        writeln!(out, "{},\"{}\",{},{}", i + 1, r.transform, r.mean_class_accuracy, r.overall_accuracy).unwrap();
    }
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut table = vec![vec![
        "rank".to_string(),
        "transform".into(),
        "mean_class_acc".into(),
        "overall_acc".into(),
    ]];
    for (i, r) in rows.iter().enumerate() {
        table.push(vec![
            (i + 1).to_string(),
            r.transform.clone(),
            format!("{:.2}", 100.0 * r.mean_class_accuracy),
            format!("{:.2}", 100.0 * r.overall_accuracy),
        ]);
    }
    align(&table)
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
    }
    out
}
