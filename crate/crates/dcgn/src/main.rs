fn main() {
    std::process::exit(dcgn::cli::run());
}
