fn main() {
    std::process::exit(splatperc_cli::main_with_args(std::env::args_os()));
}
