use std::io::IsTerminal;
use std::process::ExitCode;

fn main() -> ExitCode {
    let stdin = std::io::stdin();
    let interactive = stdin.is_terminal();
    let code = adl_cli::run(
        std::env::args_os(),
        &mut stdin.lock(),
        interactive,
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    ExitCode::from(code as u8)
}
