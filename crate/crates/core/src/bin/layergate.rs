fn main() {
    std::process::exit(layergate::cli::main_with_args(std::env::args_os()));
}
