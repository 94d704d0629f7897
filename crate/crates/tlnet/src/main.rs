fn main() {
    std::process::exit(tlnet::cli::run(std::env::args_os()));
}
