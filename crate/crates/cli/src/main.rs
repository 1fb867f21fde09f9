fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEQPLACE_LOG", "info"))
        .format_timestamp(None)
        .init();
    std::process::exit(seqplace_cli::run(std::env::args_os()));
}
