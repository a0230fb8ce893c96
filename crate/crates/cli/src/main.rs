fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DELAYLM_LOG", "info")).init();
    std::process::exit(delaylm_cli::run(std::env::args_os()));
}
