use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{Map, Value};

use super::wire::{self, Handshake, Request, Response};
use super::{derive_tool_schema, ToolError, ToolHost, ToolResult, ToolSchema};
use super::{CALL_TIMEOUT_MS, HANDSHAKE_TIMEOUT_MS};

type Pending = Arc<Mutex<HashMap<u64, Sender<Result<Response, ToolError>>>>>;

/// Tool host running as a child process, speaking the JSON-lines protocol.
///
/// Requests from many sessions are multiplexed over one pipe and matched to
/// responses by id, so replies may arrive in any order.
pub struct SubprocessHost {
    child: Mutex<Child>,
    stdin: Mutex<ChildStdin>,
    pending: Pending,
    next_id: AtomicU64,
    schemas: Vec<ToolSchema>,
    call_timeout: Duration,
}

impl SubprocessHost {
    pub fn start(program: &str, args: &[String]) -> Result<Self, ToolError> {
        Self::start_with_timeouts(
            program,
            args,
            Duration::from_millis(HANDSHAKE_TIMEOUT_MS),
            Duration::from_millis(CALL_TIMEOUT_MS),
        )
    }

    pub fn start_with_timeouts(
        program: &str,
        args: &[String],
        handshake_timeout: Duration,
        call_timeout: Duration,
    ) -> Result<Self, ToolError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ToolError::Spawn(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");

        let (hs_tx, hs_rx) = mpsc::channel::<Result<String, ToolError>>();
        let pending: Pending = Arc::default();
        let reader_pending = Arc::clone(&pending);
        thread::spawn(move || {
            let mut lines = BufReader::new(stdout).lines();
            let first = match lines.next() {
                Some(Ok(line)) => Ok(line),
                Some(Err(e)) => Err(ToolError::Handshake(e.to_string())),
                None => Err(ToolError::Handshake("host closed its output".into())),
            };
            let ok = first.is_ok();
            let _ = hs_tx.send(first);
            if !ok {
                return;
            }
            for line in lines {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                dispatch(&reader_pending, &line);
            }
            fail_all(&reader_pending, ToolError::Protocol("host closed its output".into()));
        });

        let kill = |mut child: Child, err: ToolError| {
            let _ = child.kill();
            let _ = child.wait();
            Err(err)
        };
        let line = match hs_rx.recv_timeout(handshake_timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return kill(child, e),
            Err(_) => return kill(child, ToolError::Handshake("timed out waiting for handshake".into())),
        };
        let handshake: Handshake = match wire::decode(&line) {
            Ok(h) => h,
            Err(e) => return kill(child, ToolError::Handshake(e.to_string())),
        };
        if handshake.adl_tool_host != 1 {
            return kill(
                child,
                ToolError::Handshake(format!("unsupported protocol version {}", handshake.adl_tool_host)),
            );
        }
        let mut schemas = Vec::new();
        for raw in &handshake.schemas {
            match derive_tool_schema(raw) {
                Ok(s) => schemas.push(s),
                Err(e) => return kill(child, e),
            }
        }
        Ok(Self {
            child: Mutex::new(child),
            stdin: Mutex::new(stdin),
            pending,
            next_id: AtomicU64::new(1),
            schemas,
            call_timeout,
        })
    }
}

fn dispatch(pending: &Pending, line: &str) {
    match wire::decode::<Response>(line) {
        Ok(resp) => {
            if let Some(tx) = pending.lock().unwrap().remove(&resp.id) {
                let _ = tx.send(Ok(resp));
            }
        }
        Err(err) => {
            // Attribute the bad line to its request when the id is recoverable.
            let id = serde_json::from_str::<Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(Value::as_u64));
            let mut map = pending.lock().unwrap();
            match id.and_then(|id| map.remove(&id)) {
                Some(tx) => {
                    let _ = tx.send(Err(err));
                }
                None => {
                    for (_, tx) in map.drain() {
                        let _ = tx.send(Err(err.clone()));
                    }
                }
            }
        }
    }
}

fn fail_all(pending: &Pending, err: ToolError) {
    for (_, tx) in pending.lock().unwrap().drain() {
        let _ = tx.send(Err(err.clone()));
    }
}

impl ToolHost for SubprocessHost {
    fn schemas(&self) -> &[ToolSchema] {
        &self.schemas
    }

    fn invoke(&self, name: &str, args: Map<String, Value>) -> Result<ToolResult, ToolError> {
        let schema = self
            .schema(name)
            .ok_or_else(|| ToolError::UnknownTool(name.to_string()))?;
        schema.check_args(&args)?;
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        self.pending.lock().unwrap().insert(id, tx);
        let line = wire::encode(&Request {
            id,
            call: name.to_string(),
            args,
        });
        {
            let mut stdin = self.stdin.lock().unwrap();
            if writeln!(stdin, "{line}").and_then(|_| stdin.flush()).is_err() {
                self.pending.lock().unwrap().remove(&id);
                return Err(ToolError::Protocol("host input closed".into()));
            }
        }
        match rx.recv_timeout(self.call_timeout) {
            Ok(resp) => resp?.into_result(),
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().unwrap().remove(&id);
                Err(ToolError::Timeout(name.to_string()))
            }
            Err(RecvTimeoutError::Disconnected) => Err(ToolError::Protocol("host closed its output".into())),
        }
    }
}

impl Drop for SubprocessHost {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
