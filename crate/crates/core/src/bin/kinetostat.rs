fn main() {
    std::process::exit(kinetostat::cli::run(std::env::args_os()));
}
