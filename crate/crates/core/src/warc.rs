//! Minimal WARC 1.0/1.1 record reader with per-record gzip support, plus the
//! HTTP response parsing needed to get at page payloads.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::{GzDecoder, MultiGzDecoder};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WarcError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct WarcRecord {
    pub version: String,
    pub headers: Vec<(String, String)>,
    pub block: Vec<u8>,
}

impl WarcRecord {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn record_type(&self) -> Option<&str> {
        self.header("WARC-Type")
    }

    pub fn target_uri(&self) -> Option<&str> {
        self.header("WARC-Target-URI")
            .map(|u| u.trim_matches(|c| c == '<' || c == '>'))
    }
}

/// Iterates records; a malformed record yields `Err(Malformed)` and the reader
/// resynchronizes at the next `WARC/` version line.
pub struct WarcReader<R> {
    inner: R,
    pending_version: Option<String>,
    done: bool,
}

pub fn open(path: &Path) -> io::Result<WarcReader<Box<dyn BufRead>>> {
    let mut file = BufReader::new(File::open(path)?);
    let gz = file.fill_buf()?.starts_with(&[0x1f, 0x8b]);
    let inner: Box<dyn BufRead> = if gz {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(file)
    };
    Ok(WarcReader::new(inner))
}

impl<R: BufRead> WarcReader<R> {
    pub fn new(inner: R) -> Self {
        WarcReader {
            inner,
            pending_version: None,
            done: false,
        }
    }

    fn read_line(&mut self) -> io::Result<Option<String>> {
        let mut buf = Vec::new();
        if self.inner.read_until(b'\n', &mut buf)? == 0 {
            return Ok(None);
        }
        while buf.last().is_some_and(|&b| b == b'\n' || b == b'\r') {
            buf.pop();
        }
        Ok(Some(String::from_utf8_lossy(&buf).into_owned()))
    }

    fn next_record(&mut self) -> Result<Option<WarcRecord>, WarcError> {
        let version = match self.pending_version.take() {
            Some(v) => v,
            None => loop {
                match self.read_line()? {
                    None => return Ok(None),
                    Some(l) if l.trim().is_empty() => continue,
                    Some(l) if l.starts_with("WARC/") => break l.trim().to_string(),
                    Some(l) => {
                        self.resync()?;
                        return Err(WarcError::Malformed(format!(
                            "expected version line, found {:?}",
                            truncate(&l)
                        )));
                    }
                }
            },
        };
        let mut headers: Vec<(String, String)> = Vec::new();
        loop {
            let Some(line) = self.read_line()? else {
                return Err(WarcError::Malformed("truncated header block".into()));
            };
            if line.is_empty() {
                break;
            }
            if line.starts_with([' ', '\t']) {
                if let Some(last) = headers.last_mut() {
                    last.1.push(' ');
                    last.1.push_str(line.trim());
                    continue;
                }
            }
            match line.split_once(':') {
                Some((k, v)) => headers.push((k.trim().to_string(), v.trim().to_string())),
                None => {
                    self.resync()?;
                    return Err(WarcError::Malformed(format!("bad header line {:?}", truncate(&line))));
                }
            }
        }
        let len = headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case("Content-Length"))
            .and_then(|(_, v)| v.parse::<u64>().ok());
        let Some(len) = len else {
            self.resync()?;
            return Err(WarcError::Malformed("missing or bad Content-Length".into()));
        };
        let mut block = Vec::with_capacity(len.min(1 << 24) as usize);
        (&mut self.inner).take(len).read_to_end(&mut block)?;
        if (block.len() as u64) < len {
            self.done = true;
            return Err(WarcError::Malformed("truncated record block".into()));
        }
        Ok(Some(WarcRecord {
            version,
            headers,
            block,
        }))
    }

    /// Skips ahead to the next version line and stashes it.
    fn resync(&mut self) -> io::Result<()> {
        while let Some(line) = self.read_line()? {
            if line.starts_with("WARC/") {
                self.pending_version = Some(line.trim().to_string());
                return Ok(());
            }
        }
        self.done = true;
        Ok(())
    }
}

impl<R: BufRead> Iterator for WarcReader<R> {
    type Item = Result<WarcRecord, WarcError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done && self.pending_version.is_none() {
            return None;
        }
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(WarcError::Io(e)) => {
                // A broken compressed stream cannot be resynchronized.
                self.done = true;
                self.pending_version = None;
                Some(Err(WarcError::Malformed(format!("unreadable stream: {e}"))))
            }
            Err(e) => Some(Err(e)),
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(60).collect()
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Lowercased media type without parameters.
    pub fn mime(&self) -> Option<String> {
        self.header("Content-Type").map(mime_of)
    }

    pub fn charset(&self) -> Option<String> {
        self.header("Content-Type").and_then(charset_param)
    }
}

pub fn mime_of(content_type: &str) -> String {
    content_type.split(';').next().unwrap_or("").trim().to_ascii_lowercase()
}

pub fn charset_param(content_type: &str) -> Option<String> {
    content_type.split(';').skip(1).find_map(|p| {
        let (k, v) = p.split_once('=')?;
        k.trim()
            .eq_ignore_ascii_case("charset")
            .then(|| v.trim().trim_matches(|c| c == '"' || c == '\'').to_string())
    })
}

/// Parses an HTTP/1.x response message, undoing chunked transfer coding and
/// gzip/deflate content coding.
pub fn parse_http_response(block: &[u8]) -> Option<HttpResponse> {
    let (head_end, body_start) = find_header_end(block)?;
    let head = String::from_utf8_lossy(&block[..head_end]);
    let mut lines = head.lines();
    let status_line = lines.next()?;
    if !status_line.starts_with("HTTP/") {
        return None;
    }
    let status: u16 = status_line.split_whitespace().nth(1)?.parse().ok()?;
    let headers: Vec<(String, String)> = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect();
    let mut resp = HttpResponse {
        status,
        headers,
        body: block[body_start..].to_vec(),
    };
    if resp
        .header("Transfer-Encoding")
        .is_some_and(|v| v.to_ascii_lowercase().contains("chunked"))
    {
        if let Some(body) = dechunk(&resp.body) {
            resp.body = body;
        }
    }
    match resp
        .header("Content-Encoding")
        .map(|v| v.trim().to_ascii_lowercase())
        .as_deref()
    {
        Some("gzip") | Some("x-gzip") => {
            let mut out = Vec::new();
            if GzDecoder::new(&resp.body[..]).read_to_end(&mut out).is_ok() {
                resp.body = out;
            }
        }
        Some("deflate") => {
            let mut out = Vec::new();
            if flate2::read::ZlibDecoder::new(&resp.body[..])
                .read_to_end(&mut out)
                .is_ok()
            {
                resp.body = out;
            }
        }
        _ => {}
    }
    Some(resp)
}

fn find_header_end(block: &[u8]) -> Option<(usize, usize)> {
    if let Some(i) = block.windows(4).position(|w| w == b"\r\n\r\n") {
        return Some((i, i + 4));
    }
    block.windows(2).position(|w| w == b"\n\n").map(|i| (i, i + 2))
}

fn dechunk(body: &[u8]) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        let line_end = pos + body[pos..].windows(2).position(|w| w == b"\r\n")?;
        let size_str = String::from_utf8_lossy(&body[pos..line_end]);
        let size = usize::from_str_radix(size_str.split(';').next()?.trim(), 16).ok()?;
        pos = line_end + 2;
        if size == 0 {
            return Some(out);
        }
        out.extend_from_slice(body.get(pos..pos + size)?);
        pos += size + 2;
        if pos > body.len() {
            return Some(out);
        }
    }
}
