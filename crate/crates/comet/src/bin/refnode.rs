fn main() {
    std::process::exit(comet_refnode::cli::run(std::env::args_os()));
}
