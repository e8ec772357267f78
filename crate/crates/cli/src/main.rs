use clap::Parser;

fn main() {
    let cli = mpt_cli::Cli::parse();
    if let Err(err) = mpt_cli::run(&cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
