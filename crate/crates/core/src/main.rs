fn main() {
    if let Err(e) = gcrn::cli::init_threads() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
    std::process::exit(gcrn::cli::run(std::env::args_os()));
}
