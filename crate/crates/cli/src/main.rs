fn main() {
    std::process::exit(lograd_cli::run_cli(std::env::args_os()));
}
