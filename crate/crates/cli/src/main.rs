fn main() {
    std::process::exit(mlnet_cli::main_with_args(std::env::args_os()));
}
