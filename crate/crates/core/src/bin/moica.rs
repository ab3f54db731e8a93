fn main() {
    std::process::exit(moica::cli::run(std::env::args_os()));
}
