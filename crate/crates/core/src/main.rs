use clap::Parser;

fn main() {
    let cli = aggload::cli::Cli::parse();
    if let Err(e) = aggload::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
