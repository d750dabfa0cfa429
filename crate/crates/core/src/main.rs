fn main() {
    std::process::exit(lingagg::cli::run(std::env::args_os()));
}
