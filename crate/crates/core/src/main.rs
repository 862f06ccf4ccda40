fn main() {
    std::process::exit(triplane_mimic::cli::run(std::env::args_os()));
}
