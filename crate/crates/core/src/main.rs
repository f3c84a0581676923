fn main() -> std::process::ExitCode {
    modurec::cli::run(std::env::args_os())
}
