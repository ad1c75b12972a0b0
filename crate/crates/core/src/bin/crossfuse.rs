fn main() {
    std::process::exit(crossfuse::cli::run(std::env::args_os()));
}
