fn main() {
    std::process::exit(tsrep_core::cli::main_with_args(std::env::args_os()));
}
