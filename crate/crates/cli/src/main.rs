use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

use ffacr_cli::{exit_code, run, Cli, Io};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let (mut out, mut err) = (stdout.lock(), stderr.lock());
    let result = run(cli, &mut Io { stdout: &mut out, stderr: &mut err });
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
