use std::process::ExitCode;

fn main() -> ExitCode {
    acsizer::cli::main()
}
