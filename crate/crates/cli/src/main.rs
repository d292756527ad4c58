fn main() -> std::process::ExitCode {
    fpflow_cli::main_exit()
}
