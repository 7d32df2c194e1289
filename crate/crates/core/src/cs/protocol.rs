//! Newline-delimited text protocol.
//!
//! ```text
//! AUTH <token>              -> OK | ERR <message>
//! PUT <id> <64-hex-root>    -> OK <version> | ERR <message>
//! GET <id>                  -> ROOT <64-hex-root> <version> | UNKNOWN
//! CRL                       -> CRL <length>, then <length> bytes of encoded list
//! ```
//!
//! Tokens and ids are printable ASCII without spaces. Lines are at most
//! [`MAX_LINE_LEN`] bytes.

use std::fmt;

use crate::merkle::Digest;

use super::RootRecord;

pub const MAX_LINE_LEN: usize = 512;
const MAX_KEY_LEN: usize = 64;
/// Upper bound on an encoded revocation list a client will read.
pub const MAX_CRL_LEN: usize = 1 << 20;

pub fn valid_key(s: &str) -> bool {
    !s.is_empty() && s.len() <= MAX_KEY_LEN && s.bytes().all(|b| b.is_ascii_graphic())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Auth(String),
    Put { rsd_id: String, root: Digest },
    Get { rsd_id: String },
    Crl,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ok,
    Version(u64),
    Root(RootRecord),
    Unknown,
    /// Header announcing this many bytes of revocation list.
    Crl(usize),
    Err(String),
}

fn strip_eol(line: &str) -> &str {
    let line = line.strip_suffix('\n').unwrap_or(line);
    line.strip_suffix('\r').unwrap_or(line)
}

impl Request {
    pub fn parse(line: &str) -> Result<Self, String> {
        let line = strip_eol(line);
        if line.len() > MAX_LINE_LEN {
            return Err("line too long".into());
        }
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            ["AUTH", token] if valid_key(token) => Ok(Request::Auth((*token).to_owned())),
            ["PUT", id, root] if valid_key(id) => {
                if root.len() != 64 {
                    return Err("root must be 64 hex digits".into());
                }
                let root = Digest::from_hex(root).ok_or("root must be 64 hex digits")?;
                Ok(Request::Put {
                    rsd_id: (*id).to_owned(),
                    root,
                })
            }
            ["GET", id] if valid_key(id) => Ok(Request::Get {
                rsd_id: (*id).to_owned(),
            }),
            ["CRL"] => Ok(Request::Crl),
            _ => Err(format!("malformed request {:?}", truncate(line))),
        }
    }
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Request::Auth(t) => write!(f, "AUTH {t}"),
            Request::Put { rsd_id, root } => write!(f, "PUT {rsd_id} {}", root.to_hex()),
            Request::Get { rsd_id } => write!(f, "GET {rsd_id}"),
            Request::Crl => f.write_str("CRL"),
        }
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(40) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl Response {
    pub fn parse(line: &str) -> Result<Self, String> {
        let line = strip_eol(line);
        if line.len() > MAX_LINE_LEN {
            return Err("line too long".into());
        }
        if let Some(msg) = line.strip_prefix("ERR ") {
            return Ok(Response::Err(msg.to_owned()));
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let number = |s: &str| s.parse::<u64>().map_err(|_| format!("bad number {s:?}"));
        match parts.as_slice() {
            ["OK"] => Ok(Response::Ok),
            ["OK", v] => Ok(Response::Version(number(v)?)),
            ["ROOT", root, v] if root.len() == 64 => Ok(Response::Root(RootRecord {
                root: Digest::from_hex(root).ok_or("bad root")?,
                version: number(v)?,
            })),
            ["UNKNOWN"] => Ok(Response::Unknown),
            ["CRL", len] => {
                let len = number(len)? as usize;
                if len > MAX_CRL_LEN {
                    return Err("revocation list too large".into());
                }
                Ok(Response::Crl(len))
            }
            _ => Err(format!("malformed response {:?}", truncate(line))),
        }
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Response::Ok => f.write_str("OK"),
            Response::Version(v) => write!(f, "OK {v}"),
            Response::Root(r) => write!(f, "ROOT {} {}", r.root.to_hex(), r.version),
            Response::Unknown => f.write_str("UNKNOWN"),
            Response::Crl(len) => write!(f, "CRL {len}"),
            Response::Err(m) => write!(f, "ERR {m}"),
        }
    }
}
