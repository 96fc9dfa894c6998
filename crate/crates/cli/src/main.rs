fn main() {
    std::process::exit(pairsync_cli::main_with_args(std::env::args_os()));
}
