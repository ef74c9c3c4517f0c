fn main() {
    std::process::exit(vrl_cli::run_cli(std::env::args_os()));
}
