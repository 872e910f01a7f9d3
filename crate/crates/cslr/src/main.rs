fn main() {
    std::process::exit(cslr::run_cli());
}
