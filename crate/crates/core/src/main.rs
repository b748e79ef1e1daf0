mod cli;

use std::process::ExitCode;

fn main() -> ExitCode {
    let code = cli::run(std::env::args_os());
    ExitCode::from(code)
}
