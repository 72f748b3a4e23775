use clap::Parser;

use corner_expand::cli::{main_with, Cli, EXIT_CONFIG, THREADS_ENV};

fn main() {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let threads = match v.parse::<usize>() {
            Ok(t) if t > 0 => t,
            _ => {
                eprintln!("error: {THREADS_ENV} = {v:?} is not a positive integer");
                std::process::exit(EXIT_CONFIG);
            }
        };
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    std::process::exit(main_with(&cli));
}
