use std::process::ExitCode;

use clap::Parser;
use pcache_sim::cli::{main_with, Cli};

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => main_with(cli),
        Err(e) => {
            let _ = e.print();
            ExitCode::from(if e.use_stderr() { 2 } else { 0 })
        }
    }
}
