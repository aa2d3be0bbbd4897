fn main() {
    std::process::exit(dkdl::cli::run(std::env::args_os()));
}
