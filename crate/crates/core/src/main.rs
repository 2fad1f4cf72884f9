fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn,mtdlab::learning::ica=error")).init();
    std::process::exit(mtdlab::cli::run(std::env::args_os()));
}
