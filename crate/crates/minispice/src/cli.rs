//! Batch CLI with ngspice-compatible flags:
//! `minispice -b deck.sp -r out.raw -o out.log`
//!
//! The entry point lives in the library so any crate can ship the simulator
//! as a binary target with a one-line wrapper around [`main`].

use std::path::{Path, PathBuf};
use std::process::ExitCode;

struct Args {
    deck: PathBuf,
    raw: Option<PathBuf>,
    log: Option<PathBuf>,
}

fn parse_args() -> Result<Args, String> {
    let mut deck = None;
    let mut raw = None;
    let mut log = None;
    let mut it = std::env::args().skip(1);
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "-b" | "--batch" => {} // batch is the only mode
            "-r" | "--rawfile" => {
                raw = Some(PathBuf::from(
                    it.next().ok_or_else(|| "-r needs a path".to_string())?,
                ));
            }
            "-o" | "--output" => {
                log = Some(PathBuf::from(
                    it.next().ok_or_else(|| "-o needs a path".to_string())?,
                ));
            }
            "-h" | "--help" => {
                return Err("usage: minispice [-b] [-r rawfile] [-o logfile] deck".into());
            }
            other if !other.starts_with('-') => deck = Some(PathBuf::from(other)),
            other => return Err(format!("unknown flag '{other}'")),
        }
    }
    Ok(Args {
        deck: deck.ok_or_else(|| "no input deck given".to_string())?,
        raw,
        log,
    })
}

fn emit_log(path: &Option<PathBuf>, text: &str) {
    match path {
        Some(p) => {
            if std::fs::write(p, text).is_err() {
                eprint!("{text}");
            }
        }
        None => eprint!("{text}"),
    }
}

pub fn main() -> ExitCode {
    let args = match parse_args() {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(1);
        }
    };
    let text = match std::fs::read_to_string(&args.deck) {
        Ok(t) => t,
        Err(e) => {
            let msg = format!("Error: cannot read {}: {e}\n", args.deck.display());
            emit_log(&args.log, &msg);
            eprintln!("{}", msg.trim_end());
            return ExitCode::from(1);
        }
    };
    let dir = args
        .deck
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    match crate::run_deck(&text, &dir) {
        Ok(result) => {
            emit_log(&args.log, &result.log);
            if let Some(rawpath) = &args.raw {
                let rendered = crate::rawfile::render(&result.title, &result.plots);
                if let Err(e) = std::fs::write(rawpath, rendered) {
                    eprintln!("Error: cannot write {}: {e}", rawpath.display());
                    return ExitCode::from(1);
                }
            }
            ExitCode::SUCCESS
        }
        Err((log, err)) => {
            emit_log(&args.log, &log);
            eprintln!("{err}");
            ExitCode::from(1)
        }
    }
}
