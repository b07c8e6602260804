fn main() {
    std::process::exit(exitbound::cli::run(std::env::args_os()));
}
