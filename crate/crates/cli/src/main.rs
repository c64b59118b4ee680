use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = annotate_cli::Cli::parse();
    if let Err(err) = annotate_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(annotate_cli::exit_code(&err));
    }
}
