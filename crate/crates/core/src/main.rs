fn main() {
    std::process::exit(vapaad::cli::run(std::env::args_os()));
}
