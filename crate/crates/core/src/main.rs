use clap::Parser;

fn main() {
    let cli = delaylab::cli::Cli::parse();
    std::process::exit(delaylab::cli::main_with(cli));
}
