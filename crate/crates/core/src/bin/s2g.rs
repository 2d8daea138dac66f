fn main() {
    std::process::exit(s2g::cli::main_with_args(std::env::args_os()));
}
