fn main() {
    let code = affect::cli::run(std::env::args_os());
    std::process::exit(code);
}
