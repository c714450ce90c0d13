fn main() -> std::process::ExitCode {
    seedpad::cli::main_from(std::env::args_os())
}
