fn main() {
    std::process::exit(mcakd::cli::main_with_args(std::env::args_os()));
}
