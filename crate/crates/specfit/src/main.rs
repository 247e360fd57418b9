use clap::Parser;

/// Exit codes: 0 success, 1 validation error, 2 numerical failure.
fn main() {
    configure_threads();
    let cli = specfit::cli::Cli::parse();
    if let Err(e) = specfit::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

/// SPECFIT_THREADS caps internal parallelism; 0 (or 1) means serial.
fn configure_threads() {
    if let Ok(raw) = std::env::var("SPECFIT_THREADS") {
        match raw.trim().parse::<usize>() {
            Ok(n) => {
                let threads = n.max(1);
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global()
                {
                    eprintln!("warning: could not configure thread pool: {e}");
                }
            }
            Err(_) => {
                eprintln!("warning: ignoring non-numeric SPECFIT_THREADS='{raw}'");
            }
        }
    }
}
