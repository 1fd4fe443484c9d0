use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AGMAN_LOG", "error")).init();
    let cli = agman::cli::Cli::parse();
    let result = agman::cli::run(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    std::process::exit(agman::cli::exit_code(&result));
}
