use clap::Parser;

fn main() {
    let cli = nomos::cli::Cli::parse();
    if let Err(e) = nomos::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
