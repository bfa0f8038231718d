use std::process::ExitCode;

fn main() -> ExitCode {
    crackmamba::cli::run_with(std::env::args_os(), &mut std::io::stdout())
}
