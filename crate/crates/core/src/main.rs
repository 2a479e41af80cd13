fn main() {
    spikegno::cli::init_logging();
    std::process::exit(spikegno::cli::run(std::env::args_os()));
}
