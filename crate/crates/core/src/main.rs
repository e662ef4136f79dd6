fn main() {
    std::process::exit(lwfr::app::cli::main_with_args(std::env::args_os()));
}
