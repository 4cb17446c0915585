fn main() {
    std::process::exit(dld::cli::run(std::env::args_os()));
}
