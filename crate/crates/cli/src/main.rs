fn main() {
    std::process::exit(meshqa_cli::run(std::env::args_os()));
}
