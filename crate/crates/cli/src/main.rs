use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(adner_cli::run(std::env::args_os()))
}
