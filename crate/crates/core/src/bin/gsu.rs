fn main() {
    std::process::exit(gsu::cli::main_with(std::env::args_os()));
}
