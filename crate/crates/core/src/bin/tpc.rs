use clap::Parser;

fn main() {
    let cli = tpc_core::cli::Cli::parse();
    std::process::exit(tpc_core::cli::run(cli));
}
