fn main() {
    std::process::exit(sparsedec::cli::main_entry());
}
