use clap::Parser;

fn main() {
    let cli = mais::cli::Cli::parse();
    if let Err(e) = mais::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
