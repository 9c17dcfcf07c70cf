use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRKT_LOG", "warn")).init();
    let cli = prkt_cli::Cli::parse();
    if let Err(e) = prkt_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
