fn main() {
    std::process::exit(mdnet::cli::cli_main(std::env::args_os()));
}
