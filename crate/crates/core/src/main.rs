fn main() {
    std::process::exit(civsf::harness::cli::run(std::env::args_os()));
}
