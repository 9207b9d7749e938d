use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mltts::cli::run(std::env::args()) as u8)
}
