fn main() {
    std::process::exit(polyport_cli::run_with_args(std::env::args_os()));
}
