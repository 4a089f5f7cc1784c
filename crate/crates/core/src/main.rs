fn main() {
    std::process::exit(stabxform::cli::main_with_args(std::env::args_os()));
}
