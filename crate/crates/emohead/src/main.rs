fn main() {
    std::process::exit(emohead::cli::run(std::env::args_os()));
}
