fn main() {
    std::process::exit(scpc_core::cli::run());
}
