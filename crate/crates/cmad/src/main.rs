use clap::Parser;

fn main() {
    let cli = cmad::cli::Cli::parse();
    if let Err(e) = cmad::cli::dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
