use std::process::ExitCode;

fn main() -> ExitCode {
    s3kit_cli::main_with_args(std::env::args_os())
}
