use clap::Parser;
use knowrec_cli::{run, Cli, Logger};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli, Logger::stderr()) {
        eprintln!("knowrec: {e}");
        std::process::exit(e.exit_code());
    }
}
