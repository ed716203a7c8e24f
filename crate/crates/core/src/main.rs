fn main() -> std::process::ExitCode {
    aicac_core::cli::main()
}
