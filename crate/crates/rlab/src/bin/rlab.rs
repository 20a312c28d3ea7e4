fn main() {
    std::process::exit(rlab::cli::run(std::env::args()));
}
