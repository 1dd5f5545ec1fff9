fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(crft_cli::run_command(argv));
}
