//! Minimal synchronous DevTools protocol client: one browser process, one
//! websocket, flattened target sessions.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

use crate::RenderError;

/// Flags that make output reproducible and keep the browser off the network.
const BASE_ARGS: &[&str] = &[
    "--headless=new",
    "--no-sandbox",
    "--disable-gpu",
    "--use-gl=angle",
    "--use-angle=swiftshader",
    "--disable-dev-shm-usage",
    "--no-first-run",
    "--no-default-browser-check",
    "--disable-extensions",
    "--disable-background-networking",
    "--disable-component-update",
    "--disable-sync",
    "--mute-audio",
    "--hide-scrollbars",
    "--force-color-profile=srgb",
    "--font-render-hinting=none",
    "--remote-debugging-port=0",
];

pub(crate) struct Browser {
    child: Child,
    ws: WebSocket<TcpStream>,
    next_id: u64,
    events: VecDeque<Value>,
    _profile: tempfile::TempDir,
}

fn proto(e: impl std::fmt::Display) -> RenderError {
    RenderError::Protocol(e.to_string())
}

impl Browser {
    pub fn launch(binary: &Path, extra_args: &[String], startup: Duration) -> Result<Browser, RenderError> {
        let profile = tempfile::tempdir().map_err(|e| RenderError::Launch(e.to_string()))?;
        let mut child = Command::new(binary)
            .args(BASE_ARGS)
            .args(extra_args)
            .arg(format!("--user-data-dir={}", profile.path().display()))
            .arg("about:blank")
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| RenderError::Launch(format!("{}: {e}", binary.display())))?;

        // The endpoint is announced on stderr; keep draining afterwards so the
        // pipe never fills up.
        let stderr = child.stderr.take().expect("piped stderr");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut tx = Some(tx);
            for line in BufReader::new(stderr).lines().map_while(Result::ok) {
                if let Some(rest) = line.split("DevTools listening on ").nth(1) {
                    if let Some(tx) = tx.take() {
                        let _ = tx.send(rest.trim().to_string());
                    }
                } else {
                    log::trace!("browser: {line}");
                }
            }
        });
        let endpoint = match rx.recv_timeout(startup) {
            Ok(url) => url,
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(RenderError::Launch("no DevTools endpoint announced".into()));
            }
        };
        let addr = endpoint
            .strip_prefix("ws://")
            .and_then(|r| r.split('/').next())
            .ok_or_else(|| RenderError::Launch(format!("unexpected endpoint {endpoint}")))?;
        let stream = TcpStream::connect(addr).map_err(|e| RenderError::Launch(e.to_string()))?;
        stream.set_nodelay(true).ok();
        let (ws, _) = tungstenite::client(endpoint.as_str(), stream).map_err(|e| RenderError::Launch(e.to_string()))?;
        Ok(Browser {
            child,
            ws,
            next_id: 0,
            events: VecDeque::new(),
            _profile: profile,
        })
    }

    pub fn send(&mut self, session: Option<&str>, method: &str, params: Value) -> Result<u64, RenderError> {
        self.next_id += 1;
        let mut msg = json!({"id": self.next_id, "method": method, "params": params});
        if let Some(s) = session {
            msg["sessionId"] = json!(s);
        }
        self.ws
            .send(Message::text(msg.to_string()))
            .map_err(|e| RenderError::Crashed(e.to_string()))?;
        Ok(self.next_id)
    }

    /// Sends a command without waiting for its answer.
    pub fn notify(&mut self, session: Option<&str>, method: &str, params: Value) -> Result<(), RenderError> {
        self.send(session, method, params).map(|_| ())
    }

    pub fn read(&mut self, deadline: Instant) -> Result<Value, RenderError> {
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(RenderError::Timeout);
            }
            self.ws.get_mut().set_read_timeout(Some(left)).map_err(proto)?;
            match self.ws.read() {
                Ok(Message::Text(t)) => return serde_json::from_str(t.as_str()).map_err(proto),
                Ok(Message::Close(_)) => return Err(RenderError::Crashed("websocket closed".into())),
                Ok(_) => continue,
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
                {
                    return Err(RenderError::Timeout)
                }
                Err(e) => return Err(RenderError::Crashed(e.to_string())),
            }
        }
    }

    /// Sends a command and waits for its result. Events that arrive in the
    /// meantime are queued for [`Browser::next_event`].
    pub fn call(
        &mut self,
        session: Option<&str>,
        method: &str,
        params: Value,
        deadline: Instant,
    ) -> Result<Value, RenderError> {
        let id = self.send(session, method, params)?;
        loop {
            let msg = self.read(deadline)?;
            match msg.get("id").and_then(Value::as_u64) {
                Some(i) if i == id => {
                    if let Some(err) = msg.get("error") {
                        return Err(RenderError::Protocol(format!("{method}: {err}")));
                    }
                    return Ok(msg.get("result").cloned().unwrap_or(Value::Null));
                }
                Some(_) => {}
                None => self.events.push_back(msg),
            }
        }
    }

    pub fn next_event(&mut self, deadline: Instant) -> Result<Value, RenderError> {
        if let Some(e) = self.events.pop_front() {
            return Ok(e);
        }
        loop {
            let msg = self.read(deadline)?;
            if msg.get("id").is_none() {
                return Ok(msg);
            }
        }
    }

    pub fn is_alive(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(None))
    }
}

impl Drop for Browser {
    fn drop(&mut self) {
        let _ = self.ws.close(None);
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
