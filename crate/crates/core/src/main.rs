fn main() {
    std::process::exit(rfa::cli::run_cli(std::env::args_os()));
}
