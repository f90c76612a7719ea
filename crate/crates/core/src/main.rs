fn main() {
    std::process::exit(basisnet::harness::run_cli(std::env::args_os()));
}
