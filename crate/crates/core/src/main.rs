fn main() {
    std::process::exit(phygen::cli::run_cli(std::env::args_os()));
}
