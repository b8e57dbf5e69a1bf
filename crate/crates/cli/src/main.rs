use clap::Parser;

use ppcreg_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("ppcreg: {e}");
        std::process::exit(e.exit_code());
    }
}
