fn main() -> std::process::ExitCode {
    snapper_core::cli::run()
}
