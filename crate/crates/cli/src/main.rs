fn main() {
    std::process::exit(mgll_cli::main_with_args(std::env::args_os()));
}
