fn main() -> std::process::ExitCode {
    pandora::cli::main()
}
