use clap::Parser;

fn main() {
    let cli = mftq_cli::Cli::parse();
    std::process::exit(mftq_cli::execute(&cli));
}
