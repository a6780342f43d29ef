fn main() {
    std::process::exit(fiberlab::cli::main_entry());
}
