fn main() {
    std::process::exit(ldpnn::cli::run(std::env::args_os()));
}
