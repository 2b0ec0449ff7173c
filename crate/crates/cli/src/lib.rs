//! Command-line surface: argument parsing, config merging and exit codes.

pub mod commands;
pub mod config;
pub mod verify;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use trer_core::benchmark::Method;
use trer_core::Error;

use crate::config::RunConfig;
use crate::verify::VerifyHooks;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "trer", version, about = "Transformer re-ranking for place recognition")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic sequences as dataset files.
    Generate,
    /// Train on every sequence except the holdout.
    Train {
        /// Directory holding the dataset files.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        holdout: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate re-ranking methods on one dataset.
    Eval {
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Dataset to evaluate; defaults to the holdout in the data directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        holdout: Option<String>,
        /// Comma-separated subset of none, trer, alpha-qe, oracle.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Re-rank the candidates of one query frame and print them as JSON.
    Rerank {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Frame index of the query within the dataset.
        #[arg(long)]
        query: usize,
    },
    /// Leave-one-sequence-out training and evaluation over every sequence.
    Crossval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Run the built-in verification suites.
    Verify,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parameter(_)
        | Error::Shape { .. }
        | Error::Contract(_)
        | Error::Capacity { .. } => EXIT_VALIDATION,
        Error::Format { .. } | Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Numeric(_) => {
            EXIT_DATA
        }
    }
}

fn parse_methods(names: &[String]) -> trer_core::Result<Vec<Method>> {
    names.iter().map(|s| Method::parse(s.trim())).collect()
}

/// Loads the config file (if any) and applies the global flags.
pub fn base_config(cli: &Cli) -> trer_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli, hooks: &VerifyHooks, stdout: &mut dyn Write) -> trer_core::Result<i32> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::Generate => {
            for p in commands::generate(&cfg)? {
                writeln!(stdout, "{}", p.display())?;
            }
        }
        Command::Train {
            data,
            holdout,
            epochs,
        } => {
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if let Some(h) = holdout {
                cfg.holdout = h;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let (w, l) = commands::train(&cfg)?;
            writeln!(stdout, "{}\n{}", w.display(), l.display())?;
        }
        Command::Eval {
            weights,
            dataset,
            data,
            holdout,
            methods,
        } => {
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if let Some(h) = holdout {
                cfg.holdout = h;
            }
            if let Some(m) = methods {
                cfg.methods = parse_methods(&m)?;
            }
            let weights = weights.unwrap_or_else(|| cfg.out_dir.join(commands::WEIGHTS_FILE));
            let dataset =
                dataset.unwrap_or_else(|| commands::dataset_path(&cfg.data_dir, &cfg.holdout));
            let reports = commands::eval(&cfg, &weights, &dataset)?;
            write!(stdout, "{}", trer_core::retrieval::reports_to_csv(&reports))?;
        }
        Command::Rerank {
            weights,
            dataset,
            query,
        } => {
            let out = commands::rerank(&cfg, &weights, &dataset, query)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&out)?)?;
        }
        Command::Crossval {
            data,
            epochs,
            methods,
        } => {
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(m) = methods {
                cfg.methods = parse_methods(&m)?;
            }
            let reports = commands::cross_validate(&cfg)?;
            write!(stdout, "{}", trer_core::retrieval::reports_to_csv(&reports))?;
        }
        Command::Verify => {
            let results = commands::verify(hooks, stdout)?;
            if verify::check(&results).is_err() {
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, hooks: &VerifyHooks, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli, hooks, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(args.iter().copied(), &VerifyHooks::default(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Capacity { requested: 2, available: 1 }), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Format { offset: 0, reason: "x".into() }), EXIT_DATA);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_DATA);
    }

    #[test]
    fn bad_arguments_are_validation_errors() {
        assert_eq!(run_args(&["trer", "frobnicate"]).0, EXIT_VALIDATION);
        assert_eq!(run_args(&["trer", "train", "--epochs", "many"]).0, EXIT_VALIDATION);
        assert_eq!(run_args(&["trer", "--help"]).0, EXIT_OK);
    }

    #[test]
    fn unknown_method_is_rejected() {
        let (code, _, err) = run_args(&["trer", "eval", "--methods", "none,sgv"]);
        assert_eq!(code, EXIT_VALIDATION);
        assert!(err.contains("sgv"), "{err}");
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.trrd");
        let (code, _, _) = run_args(&[
            "trer",
            "eval",
            "--methods",
            "none",
            "--dataset",
            missing.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_DATA);
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 3, "out_dir": "a"}"#).unwrap();
        let cli = Cli::try_parse_from(["trer", "--config", path.to_str().unwrap(), "--seed", "9", "verify"])
            .unwrap();
        let cfg = base_config(&cli).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("a"));
    }
}
