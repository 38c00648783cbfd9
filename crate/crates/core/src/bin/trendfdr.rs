fn main() {
    std::process::exit(trendfdr_core::cli::run(std::env::args_os()));
}
