use std::process::ExitCode;

fn main() -> ExitCode {
    match avsep_cli::run(std::env::args_os()) {
        Ok(Some(dir)) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
