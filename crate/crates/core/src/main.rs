fn main() {
    std::process::exit(jit_feedback::cli::run(std::env::args_os()));
}
