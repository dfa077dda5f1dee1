use std::process::ExitCode;

fn main() -> ExitCode {
    vmcnet::app::main()
}
