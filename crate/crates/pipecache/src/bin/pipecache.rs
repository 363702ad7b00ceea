fn main() {
    let mut out = String::new();
    let code = pipecache::cli::run_cli(std::env::args_os(), &mut out);
    if code == 0 {
        print!("{out}");
    } else {
        eprint!("{out}");
    }
    std::process::exit(code);
}
