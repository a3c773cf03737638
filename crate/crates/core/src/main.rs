fn main() {
    std::process::exit(varme::cli::run(std::env::args_os()));
}
