use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(gemma2_core::cli::main_with_args(std::env::args_os()))
}
