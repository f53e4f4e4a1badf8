fn main() {
    std::process::exit(vaedg::cli::cli_main(std::env::args()));
}
