use clap::Parser;

fn main() {
    let cli = gspi::cli::Cli::parse();
    std::process::exit(gspi::cli::run(cli));
}
