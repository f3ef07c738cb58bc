fn main() {
    maskrl::cli::run();
}
