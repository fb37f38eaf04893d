use std::process::ExitCode;

fn main() -> ExitCode {
    minispice::cli::main()
}
