use clap::Parser;

use tilelink_sim::cli::{run_cli, Cli};

fn main() {
    let cli = Cli::parse();
    std::process::exit(run_cli(cli));
}
