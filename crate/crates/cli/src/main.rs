fn main() {
    std::process::exit(keymask_cli::run(std::env::args_os()));
}
