fn main() {
    std::process::exit(pointcl_cli::run(std::env::args_os()));
}
