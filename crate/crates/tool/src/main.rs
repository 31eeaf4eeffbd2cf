fn main() {
    std::process::exit(snn_tool::run(std::env::args_os()));
}
