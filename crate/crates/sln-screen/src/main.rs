fn main() {
    std::process::exit(sln_screen::cli::run(std::env::args_os()));
}
