use std::process::ExitCode;

fn main() -> ExitCode {
    factoid_forge::runner::cli::run_cli(std::env::args_os())
}
