fn main() {
    std::process::exit(orepipe_core::cli::run(std::env::args_os()));
}
