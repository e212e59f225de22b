fn main() {
    std::process::exit(ricau::cli::run(std::env::args_os()));
}
