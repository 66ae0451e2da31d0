fn main() {
    std::process::exit(lpnkit::cli::run(std::env::args_os()));
}
