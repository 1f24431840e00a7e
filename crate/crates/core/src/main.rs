fn main() {
    std::process::exit(greaten::cli::main(std::env::args_os()));
}
