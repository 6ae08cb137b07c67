fn main() {
    std::process::exit(deepspace::cli::run(std::env::args_os()));
}
