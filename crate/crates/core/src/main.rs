fn main() {
    std::process::exit(fod::cli::run(std::env::args_os()));
}
