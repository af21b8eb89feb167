fn main() {
    std::process::exit(stgnn::cli::run_from_args(std::env::args_os()));
}
