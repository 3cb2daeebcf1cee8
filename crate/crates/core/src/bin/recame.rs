fn main() {
    std::process::exit(recame_core::cli::dispatch(std::env::args_os()));
}
