use clap::Parser;

fn main() {
    let cli = twotower_cli::Cli::parse();
    if let Err(e) = twotower_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(twotower_cli::exit_code(e.class()));
    }
}
