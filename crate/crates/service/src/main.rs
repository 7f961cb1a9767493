fn main() -> std::process::ExitCode {
    evoflow_service::cli::main()
}
