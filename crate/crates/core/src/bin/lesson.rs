fn main() {
    std::process::exit(lesson_core::harness::cli::main());
}
