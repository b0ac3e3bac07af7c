fn main() {
    std::process::exit(tc_core::cli::main_with_args(std::env::args_os()));
}
