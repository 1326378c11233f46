use std::process::ExitCode;

fn main() -> ExitCode {
    rsi_attrib::cli::run(std::env::args_os())
}
