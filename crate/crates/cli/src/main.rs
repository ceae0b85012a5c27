fn main() {
    std::process::exit(rfpsis_cli::run(std::env::args_os()));
}
