fn main() {
    std::process::exit(spatialoc::harness::cli::main_with_args(std::env::args_os()));
}
