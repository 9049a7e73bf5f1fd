fn main() -> std::process::ExitCode {
    ical_service::cli::main()
}
