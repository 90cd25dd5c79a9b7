fn main() {
    std::process::exit(avparse_cli::run(std::env::args_os()));
}
