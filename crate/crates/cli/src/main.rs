fn main() {
    std::process::exit(condensegan_cli::main_with(std::env::args_os()));
}
