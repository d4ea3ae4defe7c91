fn main() {
    std::process::exit(tokdetect::cli::run(std::env::args_os()));
}
