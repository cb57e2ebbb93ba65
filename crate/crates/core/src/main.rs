fn main() {
    std::process::exit(entropic_hedge::cli::run());
}
