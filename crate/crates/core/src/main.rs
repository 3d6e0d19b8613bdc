fn main() {
    std::process::exit(crowdkit::cli::main());
}
