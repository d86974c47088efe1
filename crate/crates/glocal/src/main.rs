fn main() {
    if let Err(err) = glocal::cli::run() {
        let payload = serde_json::json!({
            "error": { "kind": err.kind(), "message": err.to_string() }
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
