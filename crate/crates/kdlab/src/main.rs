use std::process::ExitCode;

fn main() -> ExitCode {
    kdlab::cli::entry()
}
