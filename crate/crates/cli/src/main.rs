fn main() {
    std::process::exit(cbl_cli::dispatch(std::env::args_os()));
}
