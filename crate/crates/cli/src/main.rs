use clap::Parser;

fn main() {
    let cli = ovkv_cli::Cli::parse();
    std::process::exit(ovkv_cli::dispatch(&cli));
}
