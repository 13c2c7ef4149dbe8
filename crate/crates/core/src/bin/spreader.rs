fn main() {
    std::process::exit(spreader::cli::main_with_args(std::env::args_os()));
}
