use std::process::ExitCode;

use actor_core::cli::{run_args, CliError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run_args(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(u) => {
                    let _ = u.print();
                }
                CliError::Run(r) => eprintln!("error: {r}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
