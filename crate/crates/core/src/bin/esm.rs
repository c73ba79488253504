fn main() {
    std::process::exit(esm_core::cli::run(std::env::args_os()));
}
