use std::process::ExitCode;

use clap::Parser;
use wlac_cli::commands::{error_json, run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = serde_json::json!({"error": "usage", "message": e.to_string().trim_end()});
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let out = error_json(&e);
            eprintln!("{out}");
            if out["error"] == "usage" {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
