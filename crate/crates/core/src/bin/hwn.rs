fn main() {
    std::process::exit(hwn::cli::run(std::env::args_os()));
}
