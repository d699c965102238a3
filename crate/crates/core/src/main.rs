fn main() {
    std::process::exit(resflow::cli::run(std::env::args_os()));
}
