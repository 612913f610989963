fn main() {
    std::process::exit(phasetrack_cli::run(std::env::args_os()));
}
