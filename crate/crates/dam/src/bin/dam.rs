fn main() {
    std::process::exit(dam::cli::run(std::env::args_os()));
}
