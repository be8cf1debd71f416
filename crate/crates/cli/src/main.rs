fn main() {
    std::process::exit(kpdyn_cli::run(std::env::args_os()));
}
