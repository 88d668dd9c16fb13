fn main() {
    std::process::exit(twostage::app::cli::run(std::env::args_os()));
}
