fn main() {
    std::process::exit(mkedit::run(std::env::args().collect()));
}
