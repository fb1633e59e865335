mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;
use mega_core::config::KeyValues;
use mega_core::{ErrorClass, MegaError, Result};

use args::{Cli, Command};
use commands::Context;
use output::{read_file, sha256_hex, unix_now, RunOutput};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

fn run(cli: Cli) -> Result<()> {
    let started = unix_now();
    let mut header = vec![
        ("subcommand".to_string(), cli.command.name().to_string()),
        ("mega_version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ];
    let config = match &cli.config {
        Some(path) => {
            let bytes = read_file(path)?;
            header.push(("config".into(), path.display().to_string()));
            header.push(("config_sha256".into(), sha256_hex(&bytes)));
            let text = String::from_utf8(bytes).map_err(|_| MegaError::Config("config is not UTF-8".into()))?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::default(),
    };
    if let Some(input) = &cli.input {
        header.push(("input".into(), input.display().to_string()));
        if input.is_file() {
            header.push(("input_sha256".into(), sha256_hex(&read_file(input)?)));
        }
    }
    if let Some(schema) = &cli.schema {
        header.push(("schema".into(), schema.display().to_string()));
        header.push(("schema_sha256".into(), sha256_hex(&read_file(schema)?)));
    }
    if let Some(seed) = cli.seed {
        header.push(("seed".into(), seed.to_string()));
    }
    header.push(("started_unix".into(), started.to_string()));

    let ctx = Context {
        input: cli.input,
        schema: cli.schema,
        config,
        seed: cli.seed,
        jobs: cli.jobs,
    };
    let mut out = RunOutput::default();
    match cli.command {
        Command::Aggregate(a) => commands::aggregate(&ctx, a, &mut out)?,
        Command::Efa(a) => commands::efa(&ctx, a, &mut out)?,
        Command::Sem(a) => commands::sem(&ctx, a, &mut out)?,
        Command::Regress(a) => commands::regress(&ctx, a, &mut out)?,
        Command::Rdd(a) => commands::rdd(&ctx, a, &mut out)?,
        Command::Simulate(a) => commands::simulate(&ctx, a, &mut out)?,
        Command::Report(a) => commands::report(&ctx, a, &mut out)?,
    }
    let names: Vec<String> = out.file_names().map(str::to_string).collect();
    out.commit(&cli.out_dir, &header)?;
    for n in names {
        println!("{}", cli.out_dir.join(n).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Input => EXIT_INPUT,
                ErrorClass::Numerical => EXIT_NUMERICAL,
                ErrorClass::Internal => EXIT_INTERNAL,
            })
        }
    }
}
