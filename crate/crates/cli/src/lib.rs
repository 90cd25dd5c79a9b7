//! Command-line pipeline: synthetic data, grounding pretraining, parser
//! training, prediction, evaluation and gradient verification.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::Path;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{RunConfig, KEYS};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_VERIFICATION: i32 = 5;

pub const CONFIG_ENV: &str = "AVPARSE_CONFIG";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn io_detail(path: &Path, detail: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_IO,
            message: format!("{}: {detail}", path.display()),
        }
    }

    pub fn divergence(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DIVERGENCE,
            message: message.into(),
        }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VERIFICATION,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<avparse::Error> for CliError {
    fn from(e: avparse::Error) -> Self {
        use avparse::Error as E;
        let code = match &e {
            E::Io { .. } | E::Format { .. } | E::Annotation { .. } => EXIT_IO,
            E::NonFinite(_) => EXIT_DIVERGENCE,
            _ => EXIT_CONFIG,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub const SUBCOMMANDS: &[(&str, &str)] = &[
    ("gen-synth", "generate a synthetic dataset"),
    ("pretrain", "audio-visual grounding pretraining and feature export"),
    ("train", "train the parser on weak labels"),
    ("predict", "write predicted events for a dataset split"),
    ("eval", "score predictions against full annotations"),
    ("gradcheck", "run the finite-difference gradient suites"),
];

fn key_args() -> Vec<Arg> {
    KEYS.iter()
        .map(|k| {
            let long = k.name.replace('_', "-");
            let mut arg = Arg::new(k.name)
                .long(long.clone())
                .value_name("VALUE")
                .help(format!("{} [default: {}]", k.help, k.default))
                .action(ArgAction::Set);
            if long != k.name {
                arg = arg.alias(k.name);
            }
            arg
        })
        .collect()
}

pub fn command() -> Command {
    let mut cmd = Command::new("avparse")
        .about("Audio-visual video parsing")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(
            Command::new(*name)
                .about(*about)
                .arg(
                    Arg::new("config")
                        .long("config")
                        .value_name("FILE")
                        .help(format!("key=value config file (also read from {CONFIG_ENV})")),
                )
                .args(key_args()),
        );
    }
    cmd
}

/// Resolves defaults, config file and flags for one subcommand invocation.
pub fn resolve(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let file = m
        .get_one::<String>("config")
        .cloned()
        .or_else(|| std::env::var(CONFIG_ENV).ok().filter(|s| !s.is_empty()));
    if let Some(path) = file {
        cfg.merge_file(Path::new(&path))?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = resolve(sub).and_then(|cfg| commands::dispatch(name, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
