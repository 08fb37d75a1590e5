fn main() {
    std::process::exit(acupoint::cli::run(std::env::args_os()));
}
