fn main() {
    std::process::exit(htsr_core::cli::run_from_args(std::env::args_os()));
}
