fn main() {
    std::process::exit(htan::cli::run(std::env::args_os()));
}
