fn main() {
    std::process::exit(lmft_cli::run(std::env::args_os()));
}
