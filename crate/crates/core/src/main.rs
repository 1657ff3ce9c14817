fn main() {
    std::process::exit(spectral_merge::cli::run(std::env::args_os()));
}
