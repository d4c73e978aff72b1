fn main() {
    std::process::exit(neural_sheaf::cli::run(std::env::args_os()));
}
