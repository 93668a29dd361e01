fn main() {
    std::process::exit(tsfm_cli::cli_main(std::env::args().collect()))
}
