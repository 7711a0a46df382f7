fn main() {
    std::process::exit(quadbev::cli::main_with_args(std::env::args_os()));
}
