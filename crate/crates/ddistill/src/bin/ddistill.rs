use std::process::ExitCode;

fn main() -> ExitCode {
    match ddistill::cli::main_with(std::env::args()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
