fn main() {
    std::process::exit(blindfair::cli::main_with_args(std::env::args_os()));
}
