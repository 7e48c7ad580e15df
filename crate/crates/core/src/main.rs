fn main() {
    std::process::exit(layoutforge::cli::main_with(std::env::args_os()));
}
