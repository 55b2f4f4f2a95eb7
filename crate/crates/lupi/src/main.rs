fn main() {
    std::process::exit(lupi::cli::run(std::env::args_os()));
}
