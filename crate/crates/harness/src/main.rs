fn main() {
    std::process::exit(cosal_harness::cli::run(std::env::args_os()));
}
