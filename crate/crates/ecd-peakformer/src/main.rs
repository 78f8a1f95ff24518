fn main() {
    // Placeholder until the CLI module lands.
    eprintln!("not yet wired");
    std::process::exit(1);
}
