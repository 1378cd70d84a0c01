use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use hetcp::cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = execute(cli).and_then(|o| {
        // A closed stdout (e.g. piped into `head`) is not an error.
        let _ = writeln!(std::io::stdout().lock(), "{}", o.report.to_json());
        if let Some(p) = &o.path {
            o.report.write(p)?;
        }
        o.failure.map_or(Ok(()), Err)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
