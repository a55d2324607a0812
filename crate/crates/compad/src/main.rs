fn main() {
    std::process::exit(compad::cli::run(std::env::args_os()));
}
