fn main() {
    env_logger::init();
    std::process::exit(depthped::cli::run(std::env::args_os()));
}
