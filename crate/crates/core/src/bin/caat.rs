fn main() {
    std::process::exit(caat_ehr::cli::dispatch(std::env::args_os()));
}
