use clap::Parser;
use rte_inverse::commands::{execute, Command};
use rte_inverse::config::{load, parse_override};
use rte_inverse::error::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "rte-inverse",
    version,
    about = "Forward and inverse transport experiments"
)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Flat TOML configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with status 4 when an acceptance threshold is missed.
    #[arg(long)]
    check: bool,
    /// `key=value` overrides applied after the file.
    overrides: Vec<String>,
}

fn run(args: &Args) -> Result<(), CliError> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| {
            CliError::Config(vec![format!("config: cannot read {}: {e}", p.display())])
        })?,
        None => String::new(),
    };
    let mut overrides = args
        .overrides
        .iter()
        .map(|o| parse_override(o))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), toml::Value::Integer(seed as i64)));
    }
    if let Some(out) = &args.out {
        overrides.push((
            "out_dir".into(),
            toml::Value::String(out.display().to_string()),
        ));
    }
    let loaded = load(&text, &overrides)?;
    let out = PathBuf::from(&loaded.config.out_dir);
    let report = execute(args.command, &loaded, &out, args.check)?;
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.passed { "ok  " } else { "MISS" },
            c.name,
            c.detail
        );
    }
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
