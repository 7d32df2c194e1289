//! The only sanctioned path from the regular realm into a secure partition.
//!
//! An operator authenticates, names a file, and the policy decides. Allowed
//! files are appended to a packed volume inside the secure partition through
//! the integrity session, so they are covered by the tree like any other
//! protected write. Every authentication failure and every transfer attempt
//! leaves exactly one audit record.
//!
//! Policy files hold one rule per line, first match wins, anything unmatched
//! is denied:
//!
//! ```text
//! ALLOW hash <64-hex>
//! ALLOW name <glob>
//! DENY size > <bytes>
//! ```
//!
//! Either action combines with any matcher. `#` starts a comment.
//!
//! Packed volume, starting at host block 0:
//!
//! ```text
//! block 0   "GKPV" | count u32 | next_free_block u64, rest zero
//! per file, starting on a block boundary:
//!           name_len u16 | name | size u64 | bytes, zero padded to a block
//! ```
//!
//! An all-zero block 0 is an empty volume.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::integrity::{AccessError, IntegritySession};
use crate::merkle::Digest;

const VOLUME_MAGIC: &[u8; 4] = b"GKPV";
const VOLUME_HEADER_LEN: usize = 16;
pub const MAX_NAME_LEN: usize = 255;

fn content_hash(bytes: &[u8]) -> Digest {
    Digest::from_bytes(Sha256::digest(bytes).into())
}

/// Proof of a successful operator authentication.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OperatorId(String);

impl OperatorId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct OperatorRegistry {
    credentials: HashMap<String, Digest>,
}

fn credential_digest(id: &str, secret: &str) -> Digest {
    let mut h = Sha256::new();
    h.update(b"ucap-operator-v1");
    h.update((id.len() as u32).to_le_bytes());
    h.update(id.as_bytes());
    h.update(secret.as_bytes());
    Digest::from_bytes(h.finalize().into())
}

impl OperatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: &str, secret: &str) {
        self.credentials
            .insert(id.to_owned(), credential_digest(id, secret));
    }

    fn check(&self, id: &str, secret: &str) -> bool {
        self.credentials
            .get(id)
            .is_some_and(|d| *d == credential_digest(id, secret))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Allow,
    Deny,
}

impl Action {
    fn token(self) -> &'static str {
        match self {
            Action::Allow => "ALLOW",
            Action::Deny => "DENY",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    Hash(Digest),
    Name(glob::Pattern),
    SizeAbove(u64),
}

impl Matcher {
    fn matches(&self, name: &str, bytes: &[u8], hash: &Digest) -> bool {
        match self {
            Matcher::Hash(h) => h == hash,
            Matcher::Name(p) => p.matches(name),
            Matcher::SizeAbove(n) => bytes.len() as u64 > *n,
        }
    }
}

impl fmt::Display for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Hash(h) => write!(f, "hash {h}"),
            Matcher::Name(p) => write!(f, "name {}", p.as_str()),
            Matcher::SizeAbove(n) => write!(f, "size > {n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub action: Action,
    pub matcher: Matcher,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.action.token(), self.matcher)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("policy line {line}: {message}")]
pub struct PolicyError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Policy {
    rules: Vec<Rule>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub action: Action,
    pub reason: String,
}

impl Policy {
    pub fn new(rules: Vec<Rule>) -> Self {
        Policy { rules }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| PolicyError {
                line: i + 1,
                message,
            };
            let words: Vec<&str> = line.split_whitespace().collect();
            let action = match words[0] {
                "ALLOW" => Action::Allow,
                "DENY" => Action::Deny,
                other => return Err(err(format!("unknown action {other:?}"))),
            };
            let matcher = match &words[1..] {
                ["hash", h] if h.len() == 64 => {
                    Matcher::Hash(Digest::from_hex(h).ok_or_else(|| err("bad hash".into()))?)
                }
                ["name", g] => {
                    Matcher::Name(glob::Pattern::new(g).map_err(|e| err(format!("bad glob: {e}")))?)
                }
                ["size", ">", n] => {
                    Matcher::SizeAbove(n.parse().map_err(|_| err(format!("bad size {n:?}")))?)
                }
                _ => return Err(err(format!("malformed rule {line:?}"))),
            };
            rules.push(Rule { action, matcher });
        }
        Ok(Policy { rules })
    }

    pub fn evaluate(&self, name: &str, bytes: &[u8]) -> Decision {
        let hash = content_hash(bytes);
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.matcher.matches(name, bytes, &hash) {
                return Decision {
                    action: rule.action,
                    reason: format!("rule {}: {rule}", i + 1),
                };
            }
        }
        Decision {
            action: Action::Deny,
            reason: "default deny".into(),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AuditDecision {
    Allow,
    Deny,
    AuthFailed,
}

impl AuditDecision {
    fn token(self) -> &'static str {
        match self {
            AuditDecision::Allow => "ALLOW",
            AuditDecision::Deny => "DENY",
            AuditDecision::AuthFailed => "AUTH-FAILED",
        }
    }

    fn from_token(s: &str) -> Option<Self> {
        match s {
            "ALLOW" => Some(AuditDecision::Allow),
            "DENY" => Some(AuditDecision::Deny),
            "AUTH-FAILED" => Some(AuditDecision::AuthFailed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub operator_id: String,
    pub file_name: String,
    pub content_hash: Option<Digest>,
    pub decision: AuditDecision,
    pub reason: String,
}

fn field(s: &str) -> String {
    let s: String = s
        .chars()
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect();
    if s.is_empty() {
        "-".into()
    } else {
        s
    }
}

impl AuditRecord {
    /// Tab-separated, in field order.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.seq,
            self.timestamp_ms,
            field(&self.operator_id),
            field(&self.file_name),
            self.content_hash.map_or("-".into(), |h| h.to_hex()),
            self.decision.token(),
            field(&self.reason)
        )
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        let [seq, ts, op, name, hash, decision, reason] = f.as_slice() else {
            return Err(format!("expected 7 fields, got {}", f.len()));
        };
        let content_hash = match *hash {
            "-" => None,
            h if h.len() == 64 => Some(Digest::from_hex(h).ok_or("bad hash")?),
            _ => return Err("bad hash".into()),
        };
        if [op, name, reason]
            .iter()
            .any(|s| s.is_empty() || s.contains(char::is_control))
        {
            return Err("bad text field".into());
        }
        Ok(AuditRecord {
            seq: seq.parse().map_err(|_| "bad seq")?,
            timestamp_ms: ts.parse().map_err(|_| "bad timestamp")?,
            operator_id: (*op).to_owned(),
            file_name: (*name).to_owned(),
            content_hash,
            decision: AuditDecision::from_token(decision).ok_or("bad decision")?,
            reason: (*reason).to_owned(),
        })
    }
}

/// Append-only audit trail, optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
    sink: Option<File>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_file(path: impl AsRef<Path>) -> io::Result<Self> {
        let sink = File::options().create(true).append(true).open(path)?;
        Ok(AuditLog {
            records: Vec::new(),
            sink: Some(sink),
        })
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    fn append(
        &mut self,
        timestamp_ms: u64,
        operator_id: &str,
        file_name: &str,
        content_hash: Option<Digest>,
        decision: AuditDecision,
        reason: &str,
    ) {
        let rec = AuditRecord {
            seq: self.records.last().map_or(1, |r| r.seq + 1),
            timestamp_ms,
            operator_id: field(operator_id),
            file_name: field(file_name),
            content_hash,
            decision,
            reason: field(reason),
        };
        if let Some(f) = &mut self.sink {
            // The in-memory trail stays authoritative if the mirror fails.
            let _ = writeln!(f, "{}", rec.to_line()).and_then(|_| f.flush());
        }
        self.records.push(rec);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejected {
    #[error("operator not authenticated")]
    Denied,
    #[error("policy denies the transfer: {0}")]
    PolicyDeny(String),
    #[error("target medium is blocked")]
    SessionBlocked,
    #[error("file does not fit: {0}")]
    NoSpace(String),
    #[error("packed volume unreadable: {0}")]
    Volume(String),
    #[error("write failed: {0}")]
    Write(AccessError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transferred {
    pub first_block: u64,
    pub blocks: u64,
    pub content_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedFile {
    pub name: String,
    pub bytes: Vec<u8>,
    pub first_block: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct VolumeHeader {
    count: u32,
    next_free: u64,
}

impl VolumeHeader {
    fn decode(block: &[u8]) -> Result<Self, String> {
        if block.len() < VOLUME_HEADER_LEN {
            return Err("block too small".into());
        }
        if block.iter().all(|&b| b == 0) {
            return Ok(VolumeHeader {
                count: 0,
                next_free: 1,
            });
        }
        if &block[..4] != VOLUME_MAGIC {
            return Err("no packed volume here".into());
        }
        let count = u32::from_le_bytes(block[4..8].try_into().expect("4 bytes"));
        let next_free = u64::from_le_bytes(block[8..16].try_into().expect("8 bytes"));
        if next_free == 0 || block[VOLUME_HEADER_LEN..].iter().any(|&b| b != 0) {
            return Err("corrupt volume header".into());
        }
        Ok(VolumeHeader { count, next_free })
    }

    fn encode(&self, block_size: usize) -> Vec<u8> {
        let mut b = vec![0u8; block_size];
        b[..4].copy_from_slice(VOLUME_MAGIC);
        b[4..8].copy_from_slice(&self.count.to_le_bytes());
        b[8..16].copy_from_slice(&self.next_free.to_le_bytes());
        b
    }
}

fn file_record(name: &str, bytes: &[u8], block_size: usize) -> Vec<u8> {
    let mut rec = Vec::with_capacity(2 + name.len() + 8 + bytes.len());
    rec.extend_from_slice(&(name.len() as u16).to_le_bytes());
    rec.extend_from_slice(name.as_bytes());
    rec.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    rec.extend_from_slice(bytes);
    rec.resize(rec.len().div_ceil(block_size) * block_size, 0);
    rec
}

/// Decodes a packed volume from its blocks laid end to end.
pub fn decode_volume(bytes: &[u8], block_size: usize) -> Result<Vec<PackedFile>, String> {
    if block_size < VOLUME_HEADER_LEN
        || bytes.len() < block_size
        || !bytes.len().is_multiple_of(block_size)
    {
        return Err("volume is not a whole number of blocks".into());
    }
    let header = VolumeHeader::decode(&bytes[..block_size])?;
    let total = (bytes.len() / block_size) as u64;
    if header.next_free > total {
        return Err("volume header points past the end".into());
    }
    let mut files = Vec::new();
    let mut block = 1u64;
    for _ in 0..header.count {
        let start = block as usize * block_size;
        let end = header.next_free as usize * block_size;
        let rest = bytes.get(start..end).ok_or("file table past the end")?;
        let name_len =
            u16::from_le_bytes(rest.get(..2).ok_or("truncated")?.try_into().expect("2")) as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err("bad name length".into());
        }
        let name = rest.get(2..2 + name_len).ok_or("truncated name")?;
        let name = std::str::from_utf8(name)
            .map_err(|_| "name is not UTF-8")?
            .to_owned();
        let size_at = 2 + name_len;
        let size = u64::from_le_bytes(
            rest.get(size_at..size_at + 8)
                .ok_or("truncated size")?
                .try_into()
                .expect("8"),
        );
        let data_at = size_at + 8;
        let data_end = (data_at as u64).checked_add(size).ok_or("size overflow")?;
        if data_end > rest.len() as u64 {
            return Err("file runs past the volume".into());
        }
        let data = rest[data_at..data_end as usize].to_vec();
        let used = (data_end as usize).div_ceil(block_size) as u64;
        if rest[data_end as usize..used as usize * block_size]
            .iter()
            .any(|&b| b != 0)
        {
            return Err("non-zero padding".into());
        }
        files.push(PackedFile {
            name,
            bytes: data,
            first_block: block,
        });
        block += used;
    }
    if block != header.next_free {
        return Err("file table does not end at the free pointer".into());
    }
    Ok(files)
}

/// Reads the packed volume back through verified reads.
pub fn read_volume(session: &mut IntegritySession) -> Result<Vec<PackedFile>, Rejected> {
    let b = session.block_size();
    let first = session.protected_read(0).map_err(Rejected::Write)?;
    let header = VolumeHeader::decode(&first).map_err(Rejected::Volume)?;
    if header.next_free > session.host_blocks() {
        return Err(Rejected::Volume("free pointer past the medium".into()));
    }
    let mut bytes = first;
    for lba in 1..header.next_free {
        bytes.extend(session.protected_read(lba).map_err(Rejected::Write)?);
    }
    decode_volume(&bytes, b).map_err(Rejected::Volume)
}

pub struct Gatekeeper {
    operators: OperatorRegistry,
    policy: Policy,
    audit: AuditLog,
}

impl Gatekeeper {
    pub fn new(operators: OperatorRegistry, policy: Policy, audit: AuditLog) -> Self {
        Gatekeeper {
            operators,
            policy,
            audit,
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.policy = policy;
    }

    pub fn operators_mut(&mut self) -> &mut OperatorRegistry {
        &mut self.operators
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn authenticate(
        &mut self,
        id: &str,
        secret: &str,
        now_ms: u64,
    ) -> Result<OperatorId, Rejected> {
        if self.operators.check(id, secret) {
            return Ok(OperatorId(id.to_owned()));
        }
        self.audit.append(
            now_ms,
            id,
            "-",
            None,
            AuditDecision::AuthFailed,
            "bad credentials",
        );
        Err(Rejected::Denied)
    }

    /// Checks `bytes` against the policy and, if allowed, appends it to the
    /// packed volume of `target`. `None` means the target medium failed
    /// verification.
    pub fn transfer(
        &mut self,
        operator: &OperatorId,
        name: &str,
        bytes: &[u8],
        target: Option<&mut IntegritySession>,
        now_ms: u64,
    ) -> Result<Transferred, Rejected> {
        let hash = content_hash(bytes);
        let outcome = self.try_transfer(name, bytes, hash, target);
        let (decision, reason) = match &outcome {
            Ok(t) => (
                AuditDecision::Allow,
                format!(
                    "{} written at block {}",
                    self.policy.evaluate(name, bytes).reason,
                    t.first_block
                ),
            ),
            Err(Rejected::PolicyDeny(r)) => (AuditDecision::Deny, r.clone()),
            Err(e) => (AuditDecision::Deny, e.to_string()),
        };
        self.audit.append(
            now_ms,
            operator.as_str(),
            name,
            Some(hash),
            decision,
            &reason,
        );
        outcome
    }

    fn try_transfer(
        &self,
        name: &str,
        bytes: &[u8],
        hash: Digest,
        target: Option<&mut IntegritySession>,
    ) -> Result<Transferred, Rejected> {
        let decision = self.policy.evaluate(name, bytes);
        if decision.action == Action::Deny {
            return Err(Rejected::PolicyDeny(decision.reason));
        }
        let session = target.ok_or(Rejected::SessionBlocked)?;
        if name.is_empty() || name.len() > MAX_NAME_LEN {
            return Err(Rejected::Volume("file name length".into()));
        }
        let b = session.block_size();
        let header = VolumeHeader::decode(&session.protected_read(0).map_err(Rejected::Write)?)
            .map_err(Rejected::Volume)?;
        let record = file_record(name, bytes, b);
        let blocks = (record.len() / b) as u64;
        let end = header.next_free + blocks;
        if end > session.host_blocks() {
            return Err(Rejected::NoSpace(format!(
                "needs blocks {}..{end}, medium has {}",
                header.next_free,
                session.host_blocks()
            )));
        }
        for (i, chunk) in record.chunks(b).enumerate() {
            session
                .protected_write(header.next_free + i as u64, chunk)
                .map_err(Rejected::Write)?;
        }
        let updated = VolumeHeader {
            count: header.count + 1,
            next_free: end,
        };
        session
            .protected_write(0, &updated.encode(b))
            .map_err(Rejected::Write)?;
        Ok(Transferred {
            first_block: header.next_free,
            blocks,
            content_hash: hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn policy_parsing_and_first_match() {
        let hash = content_hash(b"firmware");
        let text = format!(
            "# plant policy\nDENY size > 100\nALLOW hash {}\nALLOW name *.csv\n\n",
            hash.to_hex()
        );
        let p = Policy::parse(&text).unwrap();
        assert_eq!(p.rules().len(), 3);
        assert_eq!(p.evaluate("x.bin", b"firmware").action, Action::Allow);
        assert_eq!(p.evaluate("a.csv", b"1,2").action, Action::Allow);
        assert_eq!(p.evaluate("a.csv", &[0; 101]).action, Action::Deny);
        let d = p.evaluate("a.exe", b"1,2");
        assert_eq!(
            d,
            Decision {
                action: Action::Deny,
                reason: "default deny".into()
            }
        );
        assert_eq!(Policy::parse(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn empty_policy_denies_everything() {
        assert_eq!(Policy::default().evaluate("a", b"").action, Action::Deny);
    }

    #[test]
    fn policy_errors_carry_line_numbers() {
        let e = Policy::parse("ALLOW name *\nPERMIT name x\n").unwrap_err();
        assert_eq!(e.line, 2);
        for bad in [
            "ALLOW hash 12",
            "DENY size >",
            "DENY size < 3",
            "ALLOW name [",
            "ALLOW",
        ] {
            assert!(Policy::parse(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn audit_line_round_trip() {
        let r = AuditRecord {
            seq: 4,
            timestamp_ms: 1200,
            operator_id: "alice".into(),
            file_name: "report v2.csv".into(),
            content_hash: Some(content_hash(b"x")),
            decision: AuditDecision::Allow,
            reason: "rule 1: name *.csv".into(),
        };
        assert_eq!(AuditRecord::parse_line(&r.to_line()).unwrap(), r);
        assert_eq!(r.to_line().split('\t').count(), 7);
        assert!(AuditRecord::parse_line("1\t2\t3").is_err());
    }

    #[test]
    fn volume_record_layout() {
        let rec = file_record("ab", b"xyz", 32);
        assert_eq!(rec.len(), 32);
        assert_eq!(&rec[..2], &2u16.to_le_bytes());
        assert_eq!(&rec[2..4], b"ab");
        assert_eq!(&rec[4..12], &3u64.to_le_bytes());
        assert_eq!(&rec[12..15], b"xyz");
        let mut vol = VolumeHeader {
            count: 1,
            next_free: 2,
        }
        .encode(32);
        vol.extend(rec);
        let files = decode_volume(&vol, 32).unwrap();
        assert_eq!(
            files,
            vec![PackedFile {
                name: "ab".into(),
                bytes: b"xyz".to_vec(),
                first_block: 1
            }]
        );
        assert_eq!(decode_volume(&[0; 64], 32).unwrap(), vec![]);
    }

    proptest! {
        #[test]
        fn volumes_round_trip(files in proptest::collection::vec(("[a-z]{1,12}", proptest::collection::vec(any::<u8>(), 0..100)), 0..5)) {
            let b = 32;
            let mut body = Vec::new();
            for (n, d) in &files {
                body.extend(file_record(n, d, b));
            }
            let mut vol = VolumeHeader { count: files.len() as u32, next_free: 1 + (body.len() / b) as u64 }.encode(b);
            vol.extend(body);
            let decoded = decode_volume(&vol, b).unwrap();
            prop_assert_eq!(decoded.len(), files.len());
            for (got, (n, d)) in decoded.iter().zip(&files) {
                prop_assert_eq!(&got.name, n);
                prop_assert_eq!(&got.bytes, d);
            }
        }

        #[test]
        fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256), s in "\\PC{0,80}") {
            let _ = decode_volume(&bytes, 32);
            let _ = Policy::parse(&s);
            let _ = AuditRecord::parse_line(&s);
        }
    }
}
