use std::process::ExitCode;

fn main() -> ExitCode {
    let matches = ajem_cli::cli().get_matches();
    match ajem_cli::dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
