use std::process::ExitCode;

fn main() -> ExitCode {
    glyap::cli::main_entry()
}
