fn main() {
    std::process::exit(whatif_service::cli::run(std::env::args_os()));
}
