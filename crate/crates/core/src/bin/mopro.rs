use std::process::ExitCode;

fn main() -> ExitCode {
    mopro::cli::init_logging();
    mopro::cli::main_with_args(std::env::args_os())
}
