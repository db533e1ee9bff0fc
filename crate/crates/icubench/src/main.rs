fn main() {
    std::process::exit(icubench::cli::main_entry());
}
