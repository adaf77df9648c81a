fn main() {
    // CLI wiring lands in cli.rs; placeholder keeps the binary target valid.
    eprintln!("tamperlens: command-line interface not yet assembled");
    std::process::exit(2);
}
