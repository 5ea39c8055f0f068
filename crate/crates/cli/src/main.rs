fn main() {
    std::process::exit(buglife_cli::run(std::env::args_os()));
}
