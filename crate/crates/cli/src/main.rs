use clap::Parser;

use blo_cli::app::{execute, Cli, SEED_ENV};

fn main() {
    let cli = Cli::parse();
    let seed = std::env::var(SEED_ENV).ok();
    std::process::exit(execute(cli, seed.as_deref()));
}
