fn main() {
    std::process::exit(lcmkit::cli::main_with_args(std::env::args_os()));
}
