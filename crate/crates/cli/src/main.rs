fn main() {
    std::process::exit(acpshift_cli::main_with_args(std::env::args_os()));
}
