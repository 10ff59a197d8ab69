//! Conforming tool host that answers from a fixture file, with switches that
//! corrupt the stream for protocol tests.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use adl_core::tools::wire::{self, Handshake, Request};
use adl_core::tools::HostFixture;
use clap::{Parser, ValueEnum};
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Corrupt {
    /// Send a handshake that is not JSON.
    Handshake,
    /// Answer with JSON objects that lack required fields.
    Response,
    /// Answer with a line of plain text.
    Nonjson,
    /// Close the output after reading the first request.
    Eof,
}

#[derive(Debug, Parser)]
#[command(name = "adl-mock-tool-host")]
struct Args {
    #[arg(long)]
    fixture: PathBuf,
    #[arg(long, value_enum)]
    corrupt: Option<Corrupt>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let fixture = match HostFixture::load(&args.fixture) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("adl-mock-tool-host: {e}");
            return ExitCode::FAILURE;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let handshake = match args.corrupt {
        Some(Corrupt::Handshake) => "{\"adl_tool_host\": 1, \"schemas\": [".to_string(),
        _ => wire::encode(&Handshake {
            adl_tool_host: 1,
            schemas: fixture.schemas.clone(),
        }),
    };
    if writeln!(out, "{handshake}").and_then(|_| out.flush()).is_err() {
        return ExitCode::FAILURE;
    }
    for line in std::io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let req: Request = match wire::decode(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("adl-mock-tool-host: {e}");
                continue;
            }
        };
        let reply = match args.corrupt {
            Some(Corrupt::Response) => json!({"id": req.id, "status": "success"}).to_string(),
            Some(Corrupt::Nonjson) => "Traceback (most recent call last):".to_string(),
            Some(Corrupt::Eof) => return ExitCode::SUCCESS,
            _ => wire::encode(&fixture.respond(&req)),
        };
        if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
    ExitCode::SUCCESS
}
