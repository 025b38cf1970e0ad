fn main() {
    std::process::exit(melm::cli::run(std::env::args_os()));
}
