fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = drclip::cli::run(std::env::args_os());
    if !result.summary.is_empty() {
        eprintln!("{}", result.summary.trim_end());
    }
    std::process::exit(result.exit_code);
}
