fn main() {
    std::process::exit(ndpnet_cli::run_cli(std::env::args_os()));
}
