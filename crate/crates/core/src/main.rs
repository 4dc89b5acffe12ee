fn main() {
    std::process::exit(cfglab::harness::cli::main_with_args(std::env::args_os()));
}
