fn main() {
    std::process::exit(gilevel::cli::run(std::env::args_os().collect()));
}
