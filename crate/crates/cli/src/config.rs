//! Flat run configuration: one schema drives the config file, the command
//! line flags and the resolved copy written next to every run's outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pointcl::evaluation::{FeatureSource, FinetuneConfig, ProbeConfig};
use pointcl::losses::LossConfig;
use pointcl::models::ModelConfig;
use pointcl::synthetic::{parse_classes, SyntheticSpec};
use pointcl::training::{Objective, TrainConfig};
use pointcl::transforms::TransformSpec;
use toml::Value;

/// Bad user input. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<pointcl::Error> for ConfigError {
    fn from(e: pointcl::Error) -> Self {
        match e {
            pointcl::Error::Config(m) => ConfigError(m),
            other => ConfigError(other.to_string()),
        }
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

pub struct Key {
    pub name: &'static str,
    pub default: fn() -> Value,
    pub help: &'static str,
}

macro_rules! keys {
    ($($name:literal => $default:expr, $help:literal;)*) => {
        pub static SCHEMA: &[Key] = &[$(Key { name: $name, default: || Value::from($default), help: $help }),*];
    };
}

keys! {
    "out" => "run", "output directory; every file a command writes goes under it";
    "seed" => 0, "seed for model init, batching and probes (gen-data: generation seed)";
    "dtype" => "f32", "scalar type, f32 or f64";
    "threads" => 0, "worker threads, 0 = rayon default (POINTCL_THREADS wins)";

    "train" => "", "training dataset file; empty = generate synthetic data";
    "test" => "", "test dataset file; empty = generate synthetic data";
    "unsup" => "", "cross-validate: unlabeled pretraining dataset file; empty = synthetic";
    "classes" => "sphere,cube,cylinder,torus", "synthetic shape kinds";
    "unsup_classes" => "sphere,cube,cylinder,torus,plane-cross", "cross-validate: synthetic pretraining kinds";
    "per_class" => 200, "synthetic training samples per class";
    "test_per_class" => 50, "synthetic test samples per class (gen-data: 0 = no test file)";
    "variation" => 0.3, "synthetic per-axis stretch range";
    "noise" => 0.01, "synthetic coordinate noise";
    "segmentation" => false, "attach part labels to synthetic data";
    "data_seed" => 1, "seed of synthetic data generated on the fly";

    "model" => "desk", "width preset, desk or standard";
    "encoder_widths" => "", "comma list overriding the preset encoder widths";
    "head_widths" => "", "comma list overriding the preset head hidden widths";
    "seg_widths" => "", "point-wise branch widths; empty = no branch";
    "d_z" => 0, "embedding size, 0 = preset";
    "dropout" => 0.3, "head dropout rate during training";
    "normalize" => true, "L2-normalize embeddings";

    "objective" => "cls", "pretraining objective, cls or seg";
    "transform" => "rotate:y:180", "transformation that builds contrastive pairs";
    "pairs" => 16, "contrastive pairs per batch";
    "epochs" => 30, "pretraining epochs";
    "points" => 128, "points per cloud";
    "lr_init" => 0.001, "initial learning rate";
    "lr_floor" => 0.00001, "learning rate floor";
    "lr_gamma" => 0.7, "learning rate factor per decay period";
    "decay_epochs" => 20, "epochs per decay period";
    "bn_init" => 0.5, "initial batch norm momentum";
    "bn_cap" => 0.99, "batch norm momentum cap";
    "tau" => 0.1, "temperature";
    "symmetric" => false, "average both directions of the loss";
    "exclude_positive" => false, "leave the positive out of the softmax denominator";
    "jitter" => true, "jitter training clouds";
    "checkpoint_every" => 0, "checkpoint period in epochs, 0 = end only";
    "resume" => false, "continue from <out>/checkpoint.pclm";

    "checkpoint" => "", "pretrained checkpoint for probe, finetune, segment, export-features";
    "features" => "encoder", "probe features: encoder, head or both";
    "baseline" => false, "probe: also evaluate a random-initialized encoder";
    "probe_epochs" => 100, "probe full-batch epochs";
    "probe_lr" => 0.001, "probe learning rate";
    "standardize" => false, "z-score features before fitting the probe";
    "init" => "pretrained", "finetune encoder init: random, pretrained or both";
    "head_init" => "off", "finetune head init from checkpoint: off, on or both";
    "finetune_epochs" => 10, "supervised epochs";
    "finetune_batch" => 32, "supervised batch size";
    "finetune_lr" => 0.001, "supervised initial learning rate";
    "suite" => "table4", "ablate: table4 (single transforms) or table5 (compositions)";
}

pub fn key(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<&'static str, Value>,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "number",
        Value::Boolean(_) => "boolean",
        _ => "value",
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|k| (k.name, (k.default)())).collect(),
        }
    }
}

impl RunConfig {
    /// Sets `name` from a value of the file's type; ints are accepted where
    /// numbers are expected and int arrays where comma lists are.
    pub fn set_value(&mut self, name: &str, v: Value) -> Result<(), ConfigError> {
        let Some(k) = key(name) else {
            return bad(format!("unknown key {name:?}"));
        };
        let want = (k.default)();
        let v = match (&want, v) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (Value::String(_), Value::Array(a)) => {
                let items: Option<Vec<String>> = a.iter().map(|x| x.as_integer().map(|i| i.to_string())).collect();
                match items {
                    Some(items) => Value::String(items.join(",")),
                    None => return bad(format!("{name}: only integer arrays are accepted")),
                }
            }
            (_, v) if type_name(&v) == type_name(&want) => v,
            (_, v) => return bad(format!("{name}: expected {}, got {}", type_name(&want), type_name(&v))),
        };
        if let Value::Integer(i) = v {
            if i < 0 {
                return bad(format!("{name}: must be non-negative, got {i}"));
            }
        }
        self.values.insert(k.name, v);
        Ok(())
    }

    /// Sets `name` from command-line text.
    pub fn set_str(&mut self, name: &str, raw: &str) -> Result<(), ConfigError> {
        let Some(k) = key(name) else {
            return bad(format!("unknown key {name:?}"));
        };
        let v = match (k.default)() {
            Value::String(_) => Value::String(raw.to_string()),
            Value::Integer(_) => Value::Integer(
                raw.parse()
                    .map_err(|_| ConfigError(format!("{name}: expected integer, got {raw:?}")))?,
            ),
            Value::Float(_) => Value::Float(
                raw.parse()
                    .map_err(|_| ConfigError(format!("{name}: expected number, got {raw:?}")))?,
            ),
            Value::Boolean(_) => Value::Boolean(
                raw.parse()
                    .map_err(|_| ConfigError(format!("{name}: expected true or false, got {raw:?}")))?,
            ),
            _ => unreachable!(),
        };
        self.set_value(name, v)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text)
            .map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError(e.message().to_string()))?;
        for (k, v) in table {
            if v.is_table() {
                return bad(format!("{k}: nested tables are not supported, use flat key = value lines"));
            }
            self.set_value(&k, v)?;
        }
        Ok(())
    }

    /// `key = value` lines in schema order; reading them back gives the
    /// same configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in SCHEMA {
            writeln!(out, "{} = {}", k.name, self.values[k.name]).unwrap();
        }
        out
    }

    pub fn str(&self, k: &str) -> &str {
        self.values[k].as_str().expect("string key")
    }

    pub fn usize(&self, k: &str) -> usize {
        self.values[k].as_integer().expect("integer key") as usize
    }

    pub fn u64(&self, k: &str) -> u64 {
        self.values[k].as_integer().expect("integer key") as u64
    }

    pub fn f64(&self, k: &str) -> f64 {
        self.values[k].as_float().expect("float key")
    }

    pub fn bool(&self, k: &str) -> bool {
        self.values[k].as_bool().expect("bool key")
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(self.str("out"))
    }

    pub fn path(&self, k: &str) -> Option<PathBuf> {
        Some(self.str(k)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn f64_mode(&self) -> Result<bool, ConfigError> {
        match self.str("dtype") {
            "f32" => Ok(false),
            "f64" => Ok(true),
            other => bad(format!("dtype must be f32 or f64, got {other:?}")),
        }
    }

    fn widths(&self, k: &str) -> Result<Option<Vec<usize>>, ConfigError> {
        let raw = self.str(k).trim();
        if raw.is_empty() {
            return Ok(None);
        }
        raw.split(',')
            .map(|w| match w.trim().parse::<usize>() {
                Ok(v) if v > 0 => Ok(v),
                _ => bad(format!("{k}: {w:?} is not a positive width")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let mut m = match self.str("model") {
            "desk" => ModelConfig::desk(),
            "standard" => ModelConfig::standard(),
            other => return bad(format!("model must be desk or standard, got {other:?}")),
        };
        if let Some(w) = self.widths("encoder_widths")? {
            m.encoder_widths = w;
        }
        if let Some(w) = self.widths("head_widths")? {
            m.head_widths = w;
        }
        m.seg_widths = self.widths("seg_widths")?;
        if self.usize("d_z") > 0 {
            m.d_z = self.usize("d_z");
        }
        m.dropout = self.f64("dropout");
        m.normalize = self.bool("normalize");
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
                let cfg = TrainConfig {
            pairs: self.usize("pairs"),
            epochs: self.usize("epochs"),
            points: self.usize("points"),
            lr_init: self.f64("lr_init"),
            lr_floor: self.f64("lr_floor"),
            lr_gamma: self.f64("lr_gamma"),
            decay_epochs: self.usize("decay_epochs"),
            bn_init: self.f64("bn_init"),
            bn_cap: self.f64("bn_cap"),
            seed: self.u64("seed"),
            transform: self.str("transform").parse::<TransformSpec>()?,
            loss: LossConfig {
                tau: self.f64("tau"),
                symmetric: self.bool("symmetric"),
                exclude_positive: self.bool("exclude_positive"),
            },
            jitter: self.bool("jitter"),
            objective: self.str("objective").parse::<Objective>()?,
            checkpoint_every: self.usize("checkpoint_every"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn probe_config(&self) -> Result<ProbeConfig, ConfigError> {
        let cfg = ProbeConfig {
            epochs: self.usize("probe_epochs"),
            lr: self.f64("probe_lr"),
            points: self.usize("points"),
            seed: self.u64("seed"),
            standardize: self.bool("standardize"),
        };
        if cfg.lr.is_nan() || cfg.lr <= 0.0 || cfg.points == 0 {
            return bad("probe_lr and points must be positive");
        }
        Ok(cfg)
    }

    pub fn finetune_config(&self) -> Result<FinetuneConfig, ConfigError> {
        let cfg = FinetuneConfig {
            epochs: self.usize("finetune_epochs"),
            batch: self.usize("finetune_batch"),
            points: self.usize("points"),
            lr_init: self.f64("finetune_lr"),
            seed: self.u64("seed"),
            schedule: self.train_config()?,
            jitter: self.bool("jitter"),
        };
        if cfg.batch < 2 {
            return bad("finetune_batch must be >= 2");
        }
        Ok(cfg)
    }

    pub fn feature_sources(&self) -> Result<Vec<FeatureSource>, ConfigError> {
        match self.str("features") {
            "both" => Ok(vec![FeatureSource::Encoder, FeatureSource::Head]),
            s => Ok(vec![s.parse::<FeatureSource>()?]),
        }
    }

    /// Checks every key, whichever command will use it, plus the keys
    /// `command` cannot run without.
    pub fn validate(&self, command: &str) -> Result<(), ConfigError> {
        self.f64_mode()?;
        self.model_config()?;
        self.finetune_config()?;
        self.probe_config()?;
        self.feature_sources()?;
        self.synthetic("classes", "per_class")?;
        self.synthetic("unsup_classes", "per_class")?;
        let inits = switch(self, "init", "random", "pretrained")?;
        if command == "finetune" && inits.contains(&true) && self.path("checkpoint").is_none() {
            return bad("finetune with init = pretrained or both needs checkpoint");
        }
        switch(self, "head_init", "off", "on")?;
        if !matches!(self.str("suite"), "table4" | "table5") {
            return bad(format!("suite must be table4 or table5, got {:?}", self.str("suite")));
        }
        if self.str("out").is_empty() {
            return bad("out must not be empty");
        }
        Ok(())
    }

    pub fn synthetic(&self, classes_key: &str, per_class_key: &str) -> Result<SyntheticSpec, ConfigError> {
        let spec = SyntheticSpec {
            classes: parse_classes(self.str(classes_key))?,
            per_class: self.usize(per_class_key),
            points: self.usize("points"),
            variation: self.f64("variation"),
            noise: self.f64("noise"),
            segmentation: self.bool("segmentation"),
            ..SyntheticSpec::default()
        };
        if !(0.0..1.0).contains(&spec.variation) || spec.noise < 0.0 {
            return bad("variation must be in [0, 1) and noise non-negative");
        }
        if spec.points == 0 {
            return bad("points must be positive");
        }
        Ok(spec)
    }
}

/// `off`, `on` or `both` as the list of settings to run.
pub fn switch(cfg: &RunConfig, k: &str, off: &str, on: &str) -> Result<Vec<bool>, ConfigError> {
    match cfg.str(k) {
        s if s == off => Ok(vec![false]),
        s if s == on => Ok(vec![true]),
        "both" => Ok(vec![false, true]),
        other => bad(format!("{k} must be {off}, {on} or both, got {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.set_str("transform", "compose(rotate:y:180,jitter)").unwrap();
        c.set_str("tau", "0.2").unwrap();
        c.set_str("symmetric", "true").unwrap();
        let mut back = RunConfig::default();
        back.merge_text(&c.render()).unwrap();
        assert_eq!(back.render(), c.render());
        assert_eq!(back.f64("tau"), 0.2);
    }

    #[test]
    fn rejects_unknown_and_mistyped() {
        let mut c = RunConfig::default();
        assert!(c.merge_text("pears = 3").is_err());
        assert!(c.merge_text("pairs = \"3\"").is_err());
        assert!(c.merge_text("pairs = -3").is_err());
        assert!(c.merge_text("[section]\npairs = 3").is_err());
        assert!(c.set_str("epochs", "many").is_err());
        c.merge_text("lr_init = 1\nencoder_widths = [8, 16]").unwrap();
        assert_eq!(c.f64("lr_init"), 1.0);
        assert_eq!(c.model_config().unwrap().encoder_widths, vec![8, 16]);
    }

    #[test]
    fn defaults_build() {
        let c = RunConfig::default();
        assert_eq!(c.model_config().unwrap(), ModelConfig::desk());
        let t = c.train_config().unwrap();
        assert_eq!(t, TrainConfig::default());
        assert_eq!(c.probe_config().unwrap(), ProbeConfig::default());
    }
}
