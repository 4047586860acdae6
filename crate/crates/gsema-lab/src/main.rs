fn main() {
    if let Err(e) = gsema_lab::expcli::run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
