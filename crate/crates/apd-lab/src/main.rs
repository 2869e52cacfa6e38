use clap::Parser;

fn main() {
    let cli = apd_lab::cli::Cli::parse();
    if let Err(e) = apd_lab::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
