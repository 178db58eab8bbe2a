fn main() -> std::process::ExitCode {
    brainage::cli::main()
}
