use clap::Parser;
use resgrad_cli::args::Cli;
use resgrad_cli::exit_code;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = cli.run() {
        log::error!("{e}");
        std::process::exit(exit_code(&e));
    }
}
