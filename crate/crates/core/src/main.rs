use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = hipseg::cli::Cli::parse_from(&argv);
    match hipseg::cli::execute(&cli, argv) {
        Ok(dir) => log::info!("run directory: {}", dir.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
