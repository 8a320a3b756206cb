fn main() {
    std::process::exit(ftmssm_cli::run(std::env::args_os()));
}
