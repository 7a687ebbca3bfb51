fn main() {
    std::process::exit(queueseq::cli::run());
}
