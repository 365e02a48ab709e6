fn main() {
    std::process::exit(gvpo_lab::expcli::main_with_args(std::env::args_os()));
}
