fn main() {
    std::process::exit(intact::cli::main());
}
