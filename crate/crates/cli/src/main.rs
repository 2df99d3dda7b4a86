fn main() {
    std::process::exit(neuromotor_cli::run(std::env::args_os()));
}
