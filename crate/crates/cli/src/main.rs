use clap::Parser;
use dmoe_cli::{exit_code, run, Cli};

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    if let Err(e) = run(cli, &argv) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
