fn main() -> std::process::ExitCode {
    cxrkit::cli::main()
}
