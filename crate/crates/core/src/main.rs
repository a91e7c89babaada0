fn main() {
    std::process::exit(sdafrac::scenarios_io::cli::run());
}
