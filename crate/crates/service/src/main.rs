fn main() {
    std::process::exit(chartlint::cli::main());
}
