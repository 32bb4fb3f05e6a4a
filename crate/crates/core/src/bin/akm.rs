fn main() {
    std::process::exit(akm::cli::run(std::env::args().collect()));
}
