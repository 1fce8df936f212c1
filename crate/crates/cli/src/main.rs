use std::process::ExitCode;

fn main() -> ExitCode {
    let result = morphstn_cli::run_from_args(std::env::args_os());
    if result.exit_code == 0 {
        print!("{}", result.summary);
        if !result.summary.ends_with('\n') {
            println!();
        }
    } else {
        eprintln!("{}", result.summary.trim_end());
    }
    ExitCode::from(result.exit_code as u8)
}
