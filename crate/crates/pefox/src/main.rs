use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(pefox::cli::run(std::env::args()) as u8)
}
