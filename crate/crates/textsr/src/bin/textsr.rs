fn main() {
    std::process::exit(textsr::cli::run());
}
