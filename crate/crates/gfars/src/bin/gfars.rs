fn main() {
    std::process::exit(gfars::cli::main());
}
