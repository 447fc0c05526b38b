fn main() {
    std::process::exit(bellman_lab::cli::main_with_args(std::env::args_os()));
}
