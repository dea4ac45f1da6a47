fn main() {
    std::process::exit(probdet::cli::run(std::env::args_os()));
}
