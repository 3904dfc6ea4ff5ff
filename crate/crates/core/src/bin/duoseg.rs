fn main() {
    std::process::exit(duoseg::cli::dispatch(std::env::args_os()));
}
