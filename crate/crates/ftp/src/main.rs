use std::io::Write;

use clap::Parser;

use ftp::cli::{run, Cli, Output};

fn main() {
    match run(Cli::parse()) {
        Ok(out) => {
            let text = match out {
                Output::Json(v) => {
                    serde_json::to_string_pretty(&v).expect("JSON values serialize") + "\n"
                }
                Output::Text(t) => t,
            };
            // a closed pipe (e.g. `| head`) is not a failure
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
