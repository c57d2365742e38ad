fn main() {
    std::process::exit(diffkd::cli::main());
}
