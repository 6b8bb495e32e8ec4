fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Err(e) = deneb_cli::run_cli(args) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
