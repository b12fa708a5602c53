use clap::Parser;

fn main() {
    let cli = peclab_cli::Cli::parse();
    std::process::exit(peclab_cli::run(cli));
}
