use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(amps::cli::run_command(std::env::args_os()) as u8)
}
