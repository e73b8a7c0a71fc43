use std::process::ExitCode;

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("REVISE_LAB_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: cannot size the worker pool: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: REVISE_LAB_THREADS must be a positive integer, got `{threads}`");
                return ExitCode::from(1);
            }
        }
    }
    ExitCode::from(revise_cli::cli::dispatch(std::env::args_os()) as u8)
}
