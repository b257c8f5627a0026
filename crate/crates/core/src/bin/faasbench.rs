fn main() {
    std::process::exit(faasbench::cli::main_with_args(std::env::args_os()));
}
