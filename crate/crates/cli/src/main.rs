fn main() {
    std::process::exit(jmbma_cli::run(std::env::args_os()));
}
