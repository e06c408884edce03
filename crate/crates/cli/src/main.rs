//! `esrie`: batch front end for the speckle/deblur pipeline.
//!
//! ```text
//! esrie <command> [--config FILE] [--key value ...]
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use esrie_core::ErrorCategory;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(esrie_core::Error),
}

impl From<esrie_core::Error> for CliError {
    fn from(e: esrie_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numeric => 4,
            },
        }
    }
}

fn cli() -> Command {
    let mut app = Command::new("esrie")
        .about("Speckle simulation, despeckle/deblur network training, int8 quantization and evaluation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about, _) in config::COMMANDS {
        let mut sub = Command::new(*name).about(*about).arg(
            Arg::new("config").long("config").value_name("FILE").help("`key = value` file applied before overrides"),
        );
        if *name == "train" {
            sub = sub.arg(Arg::new("branch_pos").value_name("BRANCH").help("despeckle | deblur (same as --branch)"));
        }
        for k in config::keys(name) {
            let long = k.name.replace('_', "-");
            let mut arg = Arg::new(k.name).long(long.clone()).value_name("VALUE").action(ArgAction::Set).help(format!(
                "{} [default: {}]",
                k.help,
                if k.default.is_empty() { "none" } else { k.default }
            ));
            if long != k.name {
                arg = arg.alias(k.name);
            }
            sub = sub.arg(arg);
        }
        app = app.subcommand(sub);
    }
    app
}

fn resolve(cmd: &str, m: &ArgMatches) -> Result<RunConfig, CliError> {
    let file = match m.get_one::<String>("config") {
        Some(p) => {
            let path = PathBuf::from(p);
            let text = std::fs::read_to_string(&path).map_err(|e| esrie_core::Error::io(&path, e))?;
            config::parse_text(&text)?
        }
        None => Vec::new(),
    };
    let mut overrides = Vec::new();
    if let Some(b) = m.try_get_one::<String>("branch_pos").ok().flatten() {
        overrides.push(("branch".to_string(), b.clone()));
    }
    for k in config::keys(cmd) {
        if let Some(v) = m.get_one::<String>(k.name) {
            overrides.push((k.name.to_string(), v.clone()));
        }
    }
    RunConfig::resolve(cmd, &file, &overrides)
}

fn run(cmd: &str, m: &ArgMatches) -> Result<(), CliError> {
    let cfg = resolve(cmd, m)?;
    let threads: usize = cfg.parse("threads")?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    commands::dispatch(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    let (cmd, sub) = matches.subcommand().expect("subcommand is required");
    match run(cmd, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("esrie {cmd}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_definition_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn overrides_accept_both_spellings() {
        let m = cli().get_matches_from(["esrie", "train", "deblur", "--batch-size", "4", "--patch_size", "32"]);
        let (cmd, sub) = m.subcommand().unwrap();
        let c = resolve(cmd, sub).unwrap();
        assert_eq!(c.str("branch"), "deblur");
        assert_eq!(c.str("batch_size"), "4");
        assert_eq!(c.str("patch_size"), "32");
    }

    #[test]
    fn exit_codes_follow_categories() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(esrie_core::Error::InvalidDuration(0.0)).exit_code(), 2);
        assert_eq!(CliError::Core(esrie_core::Error::BadMagic).exit_code(), 3);
        assert_eq!(CliError::Core(esrie_core::Error::NonFiniteWeights).exit_code(), 4);
    }
}
