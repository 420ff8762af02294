fn main() {
    std::process::exit(glass::cli::main_with(std::env::args_os()));
}
