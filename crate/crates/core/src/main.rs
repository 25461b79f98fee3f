fn main() {
    std::process::exit(loadscale::cli::dispatch(std::env::args().skip(1).collect()));
}
