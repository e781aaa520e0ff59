fn main() {
    std::process::exit(mlglm::cli::run(std::env::args_os()));
}
