use std::process::ExitCode;

fn main() -> ExitCode {
    cfdetect::cli::main()
}
