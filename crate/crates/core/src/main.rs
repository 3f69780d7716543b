fn main() {
    std::process::exit(nco_core::cli::main_entry());
}
