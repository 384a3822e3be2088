use std::process::ExitCode;

use clap::Parser;
use latent_vqa::cli::{main_with, Cli};

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => main_with(cli),
        Err(e) => {
            let _ = e.print();
            // Usage errors are validation errors; help and version are not errors.
            ExitCode::from(u8::from(e.use_stderr()))
        }
    }
}
