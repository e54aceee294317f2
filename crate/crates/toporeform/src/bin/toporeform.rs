fn main() {
    std::process::exit(toporeform::cli::execute(std::env::args_os()));
}
