use clap::Parser;
use meshwatch_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    if let Err(failure) = run(cli, &mut stdout.lock()) {
        eprintln!("{}", failure.report());
        std::process::exit(1);
    }
}
