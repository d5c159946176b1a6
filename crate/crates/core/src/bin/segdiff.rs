fn main() {
    std::process::exit(segdiff::cli::run(std::env::args_os()));
}
