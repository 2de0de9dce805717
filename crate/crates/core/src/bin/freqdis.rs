fn main() {
    std::process::exit(freqdis::cli::run(std::env::args_os()));
}
