use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pointcl::checkpoint::load_checkpoint;
use pointcl::dataset::{encode_binary, load_dataset, Dataset, DatasetFormat, Split};
use pointcl::evaluation::{
    ablate_transforms, ablation_csv, ablation_table, cross_validate, extract_features, finetune_eval,
    linear_probe_eval, metrics_csv, metrics_table, segmentation_eval, write_predictions, FeatureSource, Metrics,
};
use pointcl::models::Model;
use pointcl::synthetic::generate_synthetic_dataset;
use pointcl::training::{run_with_outputs, Trainer};
use pointcl::transforms::{composed_transform_suite, single_transform_suite};
use pointcl::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{switch, ConfigError, RunConfig};

fn config_err(e: pointcl::Error) -> anyhow::Error {
    if e.is_config() {
        ConfigError::from(e).into()
    } else {
        e.into()
    }
}

/// Synthetic split built exactly the way `gen-data` builds it.
fn synthesize(cfg: &RunConfig, classes_key: &str, split: Split, seed: u64, segmentation: bool) -> Result<Dataset> {
    let per_class_key = match split {
        Split::Train => "per_class",
        Split::Test => "test_per_class",
    };
    let mut spec = cfg.synthetic(classes_key, per_class_key)?;
    spec.segmentation |= segmentation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if split == Split::Test {
        rng.set_stream(1);
        spec.first_id = (spec.classes.len() * cfg.usize("per_class")) as u32;
    }
    if classes_key != "classes" {
        rng.set_stream(2);
    }
    let mut ds = generate_synthetic_dataset(&spec, split, &mut rng).map_err(config_err)?;
    if classes_key != "classes" {
        ds.name = "unsup".into();
    }
    Ok(ds)
}

fn dataset(cfg: &RunConfig, key: &str, split: Split, segmentation: bool) -> Result<Dataset> {
    match cfg.path(key) {
        Some(p) => {
            let ds = load_dataset(&p, DatasetFormat::from_path(&p), split)
                .with_context(|| format!("loading {key} dataset {}", p.display()))?;
            if segmentation && !ds.has_point_labels() {
                return Err(ConfigError(format!("{}: segmentation needs per-point part labels", p.display())).into());
            }
            Ok(ds)
        }
        None => synthesize(cfg, "classes", split, cfg.u64("data_seed"), segmentation),
    }
}

/// Model from `checkpoint`, or a random one from the model keys when none
/// is given. The flag says whether it came from a checkpoint.
fn model<T: Scalar>(cfg: &RunConfig) -> Result<(Model<T>, bool)> {
    match cfg.path("checkpoint") {
        Some(p) => {
            let (m, _) = load_checkpoint::<T>(&p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Ok((m, true))
        }
        None => Ok((random_model(cfg)?, false)),
    }
}

fn random_model<T: Scalar>(cfg: &RunConfig) -> Result<Model<T>> {
    Ok(Model::new(cfg.model_config()?, &mut ChaCha8Rng::seed_from_u64(cfg.u64("seed")))?)
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = out.join(name);
    fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
}

fn file_tag(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '+' { c } else { '_' })
        .collect()
}

fn report(out: &Path, records: &[Metrics]) -> Result<()> {
    write(out, "metrics.csv", metrics_csv(records))?;
    let table = metrics_table(records);
    write(out, "metrics.txt", &table)?;
    print!("{table}");
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let seed = cfg.u64("seed");
    let seg = cfg.bool("segmentation");
    let mut manifest = String::new();
    writeln!(manifest, "classes = {}", cfg.str("classes"))?;
    writeln!(manifest, "seed = {seed}")?;
    let mut splits = vec![(Split::Train, "train.pcds")];
    if cfg.usize("test_per_class") > 0 {
        splits.push((Split::Test, "test.pcds"));
    }
    for (split, name) in splits {
        let ds = synthesize(cfg, "classes", split, seed, seg)?;
        let bytes = encode_binary(&ds)?;
        write(out, name, &bytes)?;
        writeln!(
            manifest,
            "{name}: samples = {}, classes = {}, parts = {}, bytes = {}",
            ds.len(),
            ds.num_classes,
            ds.num_parts,
            bytes.len()
        )?;
        eprintln!("wrote {} ({} samples)", out.join(name).display(), ds.len());
    }
    write(out, "manifest.txt", manifest)
}

pub fn pretrain<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let train_cfg = cfg.train_config()?;
    let ds = dataset(cfg, "train", Split::Train, false)?;
    let ckpt = out.join("checkpoint.pclm");
    let mut trainer = if cfg.bool("resume") && ckpt.exists() {
        let t = Trainer::<T>::resume(&ckpt, train_cfg)?;
        eprintln!("resuming at epoch {}", t.epoch);
        t
    } else {
        Trainer::<T>::new(cfg.model_config()?, train_cfg).map_err(config_err)?
    };
    let curve = run_with_outputs(&mut trainer, &ds, Some(out)).map_err(config_err)?;
    let mut epoch_means = vec![(0.0, 0usize); trainer.epoch];
    for r in &curve {
        epoch_means[r.epoch].0 += r.loss;
        epoch_means[r.epoch].1 += 1;
    }
    for (e, (sum, n)) in epoch_means.iter().enumerate().filter(|(_, (_, n))| *n > 0) {
        println!("epoch {:>3}  mean loss {:.4}", e + 1, sum / *n as f64);
    }
    eprintln!("wrote {} and {}", ckpt.display(), out.join("loss.csv").display());
    Ok(())
}

pub fn probe<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let probe_cfg = cfg.probe_config()?;
    let sources = cfg.feature_sources()?;
    let train = dataset(cfg, "train", Split::Train, false)?;
    let test = dataset(cfg, "test", Split::Test, false)?;
    let (pretrained, loaded) = model::<T>(cfg)?;
    let mut arms = vec![(if loaded { "" } else { "random/" }, pretrained)];
    if cfg.bool("baseline") && loaded {
        let base = Model::<T>::new(arms[0].1.config.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.u64("seed")))?;
        arms.push(("random/", base));
    }
    let mut records = Vec::new();
    for (prefix, m) in &arms {
        for &source in &sources {
            let (mut metrics, preds) = linear_probe_eval(m, &train, &test, source, &probe_cfg).map_err(config_err)?;
            metrics.tag = format!("{prefix}{}", source.tag());
            write_predictions(&out.join(format!("predictions_{}.csv", file_tag(&metrics.tag))), &preds)?;
            records.push(metrics);
        }
    }
    report(out, &records)
}

pub fn finetune<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ft = cfg.finetune_config()?;
    let inits = switch(cfg, "init", "random", "pretrained")?;
    let head_inits = switch(cfg, "head_init", "off", "on")?;
    let train = dataset(cfg, "train", Split::Train, false)?;
    let test = dataset(cfg, "test", Split::Test, false)?;
    let (src, _) = model::<T>(cfg)?;
    let base = src.config.clone();
    let mut records = Vec::new();
    for &pretrained in &inits {
        let heads: &[bool] = if pretrained { &head_inits } else { &[false] };
        for &head in heads {
            let tag = match (pretrained, head) {
                (false, _) => "random-init",
                (true, false) => "encoder-init",
                (true, true) => "encoder+head-init",
            };
            eprintln!("finetuning {tag}");
            let (m, preds) = finetune_eval(pretrained.then_some(&src), &base, head, &train, &test, &ft, tag)
                .map_err(config_err)?;
            write_predictions(&out.join(format!("predictions_{}.csv", file_tag(tag))), &preds)?;
            records.push(m);
        }
    }
    report(out, &records)
}

pub fn segment<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let probe_cfg = cfg.probe_config()?;
    let sources = cfg.feature_sources()?;
    let train = dataset(cfg, "train", Split::Train, true)?;
    let test = dataset(cfg, "test", Split::Test, true)?;
    let (m, loaded) = model::<T>(cfg)?;
    let mut records = Vec::new();
    for &source in &sources {
        if source == FeatureSource::Head && m.seg.is_none() {
            return Err(ConfigError("head features per point need a model with seg_widths".into()).into());
        }
        let (mut metrics, shapes) = segmentation_eval(&m, &train, &test, source, &probe_cfg).map_err(config_err)?;
        if !loaded {
            metrics.tag = format!("random/{}", metrics.tag);
        }
        let mut dump = String::from("id,category,point,gt,pred\n");
        for s in &shapes {
            for (j, (g, p)) in s.gt.iter().zip(&s.pred).enumerate() {
                writeln!(dump, "{},{},{j},{g},{p}", s.id, s.category)?;
            }
        }
        write(out, &format!("predictions_{}.csv", file_tag(&metrics.tag)), dump)?;
        records.push(metrics);
    }
    report(out, &records)
}

pub fn ablate<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let specs = match cfg.str("suite") {
        "table4" => single_transform_suite(),
        "table5" => composed_transform_suite(),
        other => return Err(ConfigError(format!("suite must be table4 or table5, got {other:?}")).into()),
    };
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let probe_cfg = cfg.probe_config()?;
    let train = dataset(cfg, "train", Split::Train, false)?;
    let test = dataset(cfg, "test", Split::Test, false)?;
    let total = specs.len();
    let mut done = 0;
    let rows = ablate_transforms::<T>(&train, &test, &model_cfg, &train_cfg, &probe_cfg, &specs, |r| {
        done += 1;
        eprintln!("[{done}/{total}] {}: {:.2}%", r.transform, 100.0 * r.overall_accuracy);
    })
    .map_err(config_err)?;
    write(out, "ablation.csv", ablation_csv(&rows))?;
    let table = ablation_table(&rows);
    write(out, "ablation.txt", &table)?;
    print!("{table}");
    Ok(())
}

pub fn export_features<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sources = cfg.feature_sources()?;
    let points = cfg.usize("points");
    let (m, _) = model::<T>(cfg)?;
    let mut sets = vec![("train", dataset(cfg, "train", Split::Train, false)?)];
    if cfg.path("test").is_some() || cfg.path("train").is_none() {
        sets.push(("test", dataset(cfg, "test", Split::Test, false)?));
    }
    for (split, ds) in &sets {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64("seed"));
        let clouds: Vec<_> = ds
            .samples
            .iter()
            .map(|s| pointcl::cloud::sample_points(s, points, &mut rng))
            .collect();
        for &source in &sources {
            let f = extract_features(&m, &clouds, source)?;
            let dim = f.shape()[1];
            let mut csv = String::from("id,label");
            for j in 0..dim {
                write!(csv, ",f{j}")?;
            }
            csv.push('\n');
            for (i, s) in ds.samples.iter().enumerate() {
                write!(csv, "{},{}", s.id, s.class_label.map_or(String::new(), |c| c.to_string()))?;
                for v in f.row(i) {
                    write!(csv, ",{}", v.to_f64_lossless())?;
                }
                csv.push('\n');
            }
            let name = format!("features_{}_{split}.csv", source.tag());
            write(out, &name, csv)?;
            eprintln!("wrote {} ({} x {dim})", out.join(&name).display(), ds.len());
        }
    }
    Ok(())
}

pub fn cross_validate_cmd<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let probe_cfg = cfg.probe_config()?;
    let unsup = match cfg.path("unsup") {
        Some(_) => dataset(cfg, "unsup", Split::Train, false)?,
        None => synthesize(cfg, "unsup_classes", Split::Train, cfg.u64("data_seed"), false)?,
    };
    let train = dataset(cfg, "train", Split::Train, false)?;
    let test = dataset(cfg, "test", Split::Test, false)?;
    if train.is_empty() {
        bail!(ConfigError(format!("{}: probe training set is empty", train.name)));
    }
    let m = cross_validate::<T>(&unsup, &train, &test, &model_cfg, &train_cfg, &probe_cfg).map_err(config_err)?;
    report(out, &[m])
}
