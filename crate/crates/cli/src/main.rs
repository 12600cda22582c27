fn main() {
    std::process::exit(pivot_cli::run(std::env::args()));
}
