fn main() {
    std::process::exit(vidswin_cli::run(std::env::args_os()));
}
