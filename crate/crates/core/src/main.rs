fn main() {
    std::process::exit(das_forge::cli::run(std::env::args_os()));
}
