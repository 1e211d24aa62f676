fn main() {
    std::process::exit(dbrd_core::cli::dispatch(std::env::args_os()));
}
