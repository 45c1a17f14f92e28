fn main() {
    std::process::exit(tdg::cli::main_with_args(std::env::args_os()));
}
