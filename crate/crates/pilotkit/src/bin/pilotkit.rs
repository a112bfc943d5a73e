fn main() -> std::process::ExitCode {
    pilotkit::cli::main()
}
