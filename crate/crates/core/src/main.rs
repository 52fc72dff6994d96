fn main() {
    std::process::exit(widthfold::cli::main());
}
