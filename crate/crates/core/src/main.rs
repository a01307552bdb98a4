fn main() {
    std::process::exit(slt_forge::cli::cli_main(std::env::args_os()));
}
