fn main() {
    std::process::exit(neft_core::cli::run(std::env::args_os()));
}
