fn main() {
    std::process::exit(quadleague_cli::main_with(std::env::args_os()));
}
