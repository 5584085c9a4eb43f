fn main() {
    std::process::exit(rescore_cli::run(std::env::args_os()));
}
