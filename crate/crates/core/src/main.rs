use std::process::ExitCode;

use clap::Parser;
use tricat::cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": { "module": e.module(), "message": e.to_string() } });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
