//! Command-line entry point.

fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(lana::cli::run(&args));
}
