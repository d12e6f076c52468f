fn main() {
    std::process::exit(datumwise::cli::main_entry());
}
