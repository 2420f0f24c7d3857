fn main() {
    std::process::exit(dfa_cli::run(std::env::args_os()));
}
