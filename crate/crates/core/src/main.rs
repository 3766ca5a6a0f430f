fn main() {
    std::process::exit(sunplug::cli::main_with_args(std::env::args_os()));
}
