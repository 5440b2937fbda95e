fn main() {
    std::process::exit(vqa::cli::run());
}
