fn main() {
    std::process::exit(evfuse::cli::run(std::env::args_os()));
}
