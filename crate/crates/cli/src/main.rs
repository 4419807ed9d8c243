use clap::Parser;
use ope_lab_cli::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(e) = ope_lab_cli::run(&cli) {
        eprintln!("error: {}: {e}", e.name());
        std::process::exit(e.exit_code());
    }
}
