fn main() {
    std::process::exit(flowseg_cli::run(std::env::args_os()));
}
