fn main() {
    std::process::exit(pime::cli::main_with_args(std::env::args_os()));
}
