fn main() {
    std::process::exit(apcsmooth::cli::run(std::env::args_os()));
}
