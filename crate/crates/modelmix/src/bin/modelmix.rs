fn main() {
    std::process::exit(modelmix::cli::main_entry());
}
