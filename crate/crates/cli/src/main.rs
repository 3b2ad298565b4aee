fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let status = dablog_cli::run(&argv, &mut std::io::stderr());
    std::process::exit(status);
}
