fn main() {
    std::process::exit(brwre::cli::run(std::env::args_os()));
}
