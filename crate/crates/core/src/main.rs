fn main() {
    std::process::exit(prefinfer::cli::run(std::env::args_os()));
}
