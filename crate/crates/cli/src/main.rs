fn main() {
    std::process::exit(genadapter_cli::main_with_args(std::env::args_os()));
}
