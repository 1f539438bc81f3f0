fn main() {
    std::process::exit(impactsim_cli::main_with_args(std::env::args_os()));
}
