use std::process::ExitCode;

fn main() -> ExitCode {
    splatocc::cli::run(std::env::args_os())
}
