use std::process::exit;

fn main() {
    exit(dmads_cli::run_cli(std::env::args_os()));
}
