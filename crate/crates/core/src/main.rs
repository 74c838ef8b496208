use std::process::ExitCode;

fn main() -> ExitCode {
    mom_nash::cli::main_with_args(std::env::args_os())
}
