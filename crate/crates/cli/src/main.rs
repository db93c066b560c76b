//! `parabolicity <command> [--config file.ini] [--key value ...]`
//!
//! Exit codes: 0 when every checked invariant holds, 2 when one fails (named
//! on stderr and in the report), 1 on bad input.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use serde::Serialize;

use commands::{Outcome, RunError};
use config::{ExperimentConfig, KEYS};

const COMMANDS: &[&str] = &["classify", "capacity", "scaling", "khasminskii", "evans", "lemma-star", "audit"];

fn cli() -> Command {
    let mut cmd = Command::new("parabolicity")
        .version(env!("CARGO_PKG_VERSION"))
        .about("p-parabolicity experiments on rotationally symmetric model manifolds")
        .arg(
            Arg::new("command")
                .required(true)
                .value_parser(COMMANDS.to_vec())
                .help("experiment to run"),
        )
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .value_parser(clap::value_parser!(PathBuf))
                .help("INI file of key = value pairs; flags override it"),
        );
    for &(key, help) in KEYS {
        cmd = cmd.arg(Arg::new(key).long(key).value_name("VALUE").help(help));
    }
    cmd
}

#[derive(Serialize)]
struct Report<'a> {
    schema: u32,
    command: &'a str,
    status: &'a str,
    failures: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
    config: &'a ExperimentConfig,
    result: serde_json::Value,
}

fn configure(matches: &ArgMatches, command: &str) -> Result<ExperimentConfig, RunError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = matches.get_one::<PathBuf>("config") {
        let file = config::read_file(path, command)?;
        cfg.apply(file.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    }
    let flags: Vec<(&str, &str)> = KEYS
        .iter()
        .filter_map(|&(key, _)| matches.get_one::<String>(key).map(|v| (key, v.as_str())))
        .collect();
    cfg.apply(flags)?;
    Ok(cfg)
}

fn dispatch(command: &str, cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    match command {
        "classify" => commands::classify(cfg),
        "capacity" => commands::capacity_cmd(cfg),
        "scaling" => commands::scaling(cfg),
        "khasminskii" => commands::khasminskii(cfg),
        "evans" => commands::evans(cfg),
        "lemma-star" => commands::lemma_star(cfg),
        "audit" => commands::audit(cfg),
        other => Err(RunError::Input(format!("unknown command `{other}`"))),
    }
}

fn write_report(cfg: &ExperimentConfig, report: &Report) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join(format!("{}.json", report.command)), text)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let command = matches.get_one::<String>("command").expect("required").clone();
    let mut cfg = ExperimentConfig::default();
    // Input-error reports still go where the caller asked.
    if let Some(out) = matches.get_one::<String>("out") {
        cfg.out = PathBuf::from(out.trim());
    }
    let result = configure(&matches, &command).and_then(|c| {
        cfg = c;
        std::fs::create_dir_all(&cfg.out)
            .map_err(|e| RunError::Input(format!("cannot create {}: {e}", cfg.out.display())))?;
        dispatch(&command, &cfg)
    });

    let (code, status, failures, message, body) = match result {
        Ok(o) => {
            println!("{}", o.summary);
            let code = if o.failures.is_empty() { 0 } else { 2 };
            let status = if o.failures.is_empty() { "ok" } else { "failed" };
            (code, status, o.failures, None, o.result)
        }
        Err(RunError::Failed { name, message }) => (2, "failed", vec![name], Some(message), serde_json::Value::Null),
        Err(RunError::Input(message)) => (1, "input-error", Vec::new(), Some(message), serde_json::Value::Null),
    };
    for f in &failures {
        eprintln!("failed invariant: {f}");
    }
    if let Some(m) = &message {
        eprintln!("error: {m}");
    }
    let report = Report {
        schema: 1,
        command: &command,
        status,
        failures: &failures,
        message,
        config: &cfg,
        result: body,
    };
    if let Err(e) = write_report(&cfg, &report) {
        eprintln!("error: cannot write report: {e}");
        if code == 0 {
            return ExitCode::from(1);
        }
    }
    ExitCode::from(code)
}
