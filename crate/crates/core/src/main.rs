fn main() {
    std::process::exit(structflow::cli::cli_main(std::env::args().collect()));
}
