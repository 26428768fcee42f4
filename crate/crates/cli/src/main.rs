fn main() {
    std::process::exit(fedprompt_cli::main_with_args(std::env::args_os()));
}
