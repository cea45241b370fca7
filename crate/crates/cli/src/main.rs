fn main() {
    std::process::exit(caetc_cli::main_with_args(std::env::args_os()));
}
