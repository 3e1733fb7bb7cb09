fn main() {
    std::process::exit(rkconsensus::cli::main());
}
