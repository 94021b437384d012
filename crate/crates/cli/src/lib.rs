//! Command-line driver. Every subcommand takes the same flat key set, from
//! `--config FILE` and from `--key value` flags (flags win).
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad configuration.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

pub use config::{ConfigError, RunConfig};

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("gen-data", "write a synthetic dataset (train.pcds, test.pcds, manifest.txt)"),
    ("pretrain", "contrastive pretraining; writes checkpoint.pclm and loss.csv"),
    ("probe", "linear probe on frozen features"),
    ("finetune", "supervised training from a random or pretrained encoder"),
    ("segment", "per-point probe on part labels, reports mIoU"),
    ("ablate", "pretrain and probe once per transformation of a suite"),
    ("export-features", "dump frozen features as CSV"),
    ("cross-validate", "pretrain on one dataset, probe on another"),
];

fn flag_name(key: &str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

pub fn cli() -> Command {
    let mut keyed: Vec<Arg> = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("flat key = value configuration file")];
    for k in config::SCHEMA {
        let mut arg = Arg::new(k.name)
            .long(flag_name(k.name))
            .value_name("VALUE")
            .help(k.help)
            .action(ArgAction::Set);
        if k.name.contains('_') {
            arg = arg.alias(k.name);
        }
        if (k.default)().is_bool() {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        keyed.push(arg);
    }
    let mut cmd = Command::new("pointcl")
        .about("Contrastive representation learning for point clouds")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(*name).about(*about).args(keyed.clone()));
    }
    cmd
}

fn resolve(m: &ArgMatches) -> std::result::Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.merge_file(Path::new(path))?;
    }
    for k in config::SCHEMA {
        if m.value_source(k.name) == Some(ValueSource::CommandLine) {
            if let Some(v) = m.get_one::<String>(k.name) {
                cfg.set_str(k.name, v)?;
            }
        }
    }
    Ok(cfg)
}

fn init_threads(cfg: &RunConfig) -> std::result::Result<(), ConfigError> {
    let n = match std::env::var("POINTCL_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| ConfigError(format!("POINTCL_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => cfg.usize("threads"),
    };
    if n > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(name: &str, cfg: &RunConfig, out: &Path) -> Result<()> {
    use commands::*;
    macro_rules! typed {
        ($f:ident) => {
            if cfg.f64_mode()? {
                $f::<f64>(cfg, out)
            } else {
                $f::<f32>(cfg, out)
            }
        };
    }
    match name {
        "gen-data" => gen_data(cfg, out),
        "pretrain" => typed!(pretrain),
        "probe" => typed!(probe),
        "finetune" => typed!(finetune),
        "segment" => typed!(segment),
        "ablate" => typed!(ablate),
        "export-features" => typed!(export_features),
        "cross-validate" => typed!(cross_validate_cmd),
        other => unreachable!("unknown subcommand {other}"),
    }
}

/// Runs one subcommand. The resolved configuration is written to
/// `<out>/config.toml` before any work; a failure leaves `<out>/.failed`
/// with the error next to whatever was written so far.
pub fn execute(name: &str, cfg: &RunConfig) -> Result<()> {
    cfg.validate(name)?;
    init_threads(cfg)?;
    let out = cfg.out();
    fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    let marker = out.join(".failed");
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    fs::write(out.join("config.toml"), cfg.render()).context("writing resolved config")?;
    let result = dispatch(name, cfg, &out);
    if let Err(e) = &result {
        let _ = fs::write(&marker, format!("{e:#}\n"));
    }
    result
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<pointcl::Error>() {
            if e.is_config() {
                return 2;
            }
        }
    }
    1
}

/// Parses `args` (program name first), runs, reports errors on stderr and
/// returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve(sub).map_err(anyhow::Error::from).and_then(|cfg| execute(name, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == 2 { "configuration error" } else { "error" };
            eprintln!("pointcl: {kind}: {e:#}");
            code
        }
    }
}
