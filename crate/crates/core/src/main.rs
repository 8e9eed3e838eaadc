fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = bivm::cli::thread_cap() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not cap worker threads: {e}");
        }
    }
    let code = bivm::cli::run(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
