fn main() {
    std::process::exit(stochcon_cli::run_cli(std::env::args_os()));
}
