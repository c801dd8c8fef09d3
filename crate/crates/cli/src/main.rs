use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use hgfe_cli::args::Cli;
use hgfe_cli::EXIT_USAGE;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let precision = std::env::var("HGFE_PRECISION").ok();
    let outcome = match hgfe_cli::run(&cli, precision.as_deref()) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("hgfe: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    let written = match &cli.global.out {
        Some(path) => std::fs::write(path, &outcome.body),
        None => std::io::stdout().write_all(outcome.body.as_bytes()),
    };
    if let Err(e) = written {
        eprintln!("hgfe: cannot write report: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    ExitCode::from(outcome.code)
}
