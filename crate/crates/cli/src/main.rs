fn main() {
    std::process::exit(ant_lab::app::run(std::env::args_os()));
}
