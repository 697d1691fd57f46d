fn main() {
    std::process::exit(adapterforge::cli::main_with_args(std::env::args_os()));
}
