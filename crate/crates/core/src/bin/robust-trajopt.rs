fn main() {
    std::process::exit(robust_trajopt::cli::run(std::env::args_os()));
}
