fn main() {
    std::process::exit(mlcnet::cli::run(std::env::args_os()));
}
