fn main() {
    std::process::exit(covflow_cli::main_with_args(std::env::args_os()));
}
