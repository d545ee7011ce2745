use clap::Parser;
use normative_gp_cli::{configure_threads, exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = configure_threads().and_then(|_| run(&cli)) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}
