fn main() {
    std::process::exit(mvpose::cli::main_with_args(std::env::args_os()));
}
