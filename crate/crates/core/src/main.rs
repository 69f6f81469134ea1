fn main() {
    std::process::exit(ratekit::cli::run());
}
