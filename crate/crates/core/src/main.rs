fn main() {
    std::process::exit(latentseq::cli::main_with(std::env::args_os()));
}
