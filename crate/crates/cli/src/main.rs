fn main() {
    std::process::exit(gormpo_cli::run(std::env::args_os()));
}
