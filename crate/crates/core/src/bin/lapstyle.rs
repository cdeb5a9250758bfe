fn main() {
    std::process::exit(lapstyle::cli::run(std::env::args_os()));
}
