fn main() {
    std::process::exit(ivasep_cli::run(std::env::args_os()));
}
