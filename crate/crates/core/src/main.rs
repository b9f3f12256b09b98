fn main() {
    std::process::exit(valueshift::cli::run(std::env::args_os()));
}
