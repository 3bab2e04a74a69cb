use rotatek::harness::cli::cli_main;

fn main() {
    std::process::exit(cli_main(std::env::args_os()));
}
