fn main() {
    std::process::exit(ctxfilter::cli::run_cli(std::env::args_os()));
}
