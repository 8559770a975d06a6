use std::process::ExitCode;

fn main() -> ExitCode {
    drivelens::cli::main()
}
