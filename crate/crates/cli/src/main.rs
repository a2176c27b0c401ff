use clap::Parser;
use drdid_cli::{init_logging, run, Cli};

fn main() {
    let cli = Cli::parse();
    init_logging();
    std::process::exit(run(&cli));
}
