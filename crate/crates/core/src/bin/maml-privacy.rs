fn main() {
    if let Err(e) = maml_privacy::harness::cli::run(std::env::args_os()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
