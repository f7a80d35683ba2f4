fn main() {
    std::process::exit(arcslot::cli::main_with(std::env::args_os()));
}
