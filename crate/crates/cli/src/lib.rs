//! The `ajem` command line: `train`, `sample`, `attack` and `eval`.

pub mod commands;
pub mod config;
pub mod data;

use std::ffi::OsString;

use anyhow::Result;
use clap::{ArgMatches, Command};

use config::{add_args, Key, RunConfig};

type Handler = fn(RunConfig) -> Result<()>;

fn subcommands() -> Vec<(&'static str, &'static str, Vec<Key>, Handler)> {
    vec![
        (
            "train",
            "Train a classifier and write a checkpoint",
            commands::train_keys(),
            commands::cmd_train,
        ),
        (
            "sample",
            "Generate samples from a checkpoint",
            commands::sample_keys(),
            commands::cmd_sample,
        ),
        (
            "attack",
            "Attack a dataset and report robust accuracy",
            commands::attack_keys(),
            commands::cmd_attack,
        ),
        ("eval", "Score sample sets", commands::eval_keys(), commands::cmd_eval),
    ]
}

pub fn cli() -> Command {
    let mut cmd = Command::new("ajem")
        .about("Adversarially trained joint energy-based models")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about, keys, _) in subcommands() {
        cmd = cmd.subcommand(add_args(Command::new(name).about(about), &keys));
    }
    cmd
}

pub fn dispatch(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand is required");
    let (_, _, keys, handler) = subcommands()
        .into_iter()
        .find(|s| s.0 == name)
        .expect("registered subcommand");
    handler(RunConfig::resolve(&keys, sub)?)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    dispatch(&cli().try_get_matches_from(args)?)
}
