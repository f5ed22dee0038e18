fn main() {
    std::process::exit(rwe::cli::run(std::env::args_os()));
}
