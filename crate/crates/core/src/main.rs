fn main() {
    std::process::exit(pairlmm::cli::main());
}
