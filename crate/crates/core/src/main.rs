fn main() -> std::process::ExitCode {
    fgel::cli::run(std::env::args_os())
}
