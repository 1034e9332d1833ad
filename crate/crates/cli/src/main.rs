//! The `lemo` binary.

fn main() {
    std::process::exit(lemo_cli::main_with_args(std::env::args_os()));
}
