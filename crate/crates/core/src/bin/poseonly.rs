fn main() {
    let code = poseonly::cli::run_cli(std::env::args_os(), &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
