//! Supervisor for simulated remote tasks: `flowmill-supervisor --home <dir> --job <file>`.

use std::path::PathBuf;
use std::process::ExitCode;

use flowmill_core::backends::supervise;
use flowmill_core::home::Home;

fn main() -> ExitCode {
    let mut args = std::env::args_os().skip(1);
    let (mut home, mut job) = (None, None);
    while let Some(a) = args.next() {
        match a.to_str() {
            Some("--home") => home = args.next().map(PathBuf::from),
            Some("--job") => job = args.next().map(PathBuf::from),
            _ => {
                eprintln!("unexpected argument {a:?}");
                return ExitCode::from(64);
            }
        }
    }
    let (Some(home), Some(job)) = (home, job) else {
        eprintln!("usage: flowmill-supervisor --home <dir> --job <file>");
        return ExitCode::from(64);
    };
    match supervise(&Home::new(home), &job) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("supervisor failed: {e}");
            ExitCode::from(70)
        }
    }
}
