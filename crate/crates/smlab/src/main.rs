fn main() {
    std::process::exit(smlab::cli_main());
}
