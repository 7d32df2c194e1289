//! Scripted runs of a simulated mediator, used to replay attacks end to end.
//!
//! A scenario is a line-oriented script. Header lines come first and
//! configure the run; steps follow and are executed in order against a
//! fresh simulator. `#` starts a comment.
//!
//! ```text
//! seed 7                       # rng seed for keys, challenges, guesses
//! cs                           # run with a coordination service
//! ports 2
//! flush-interval 500
//!
//! format m blocks=8 bs=512 [shift=1]
//! attach <port> keyboard|mouse|printer
//! attach <port> storage <medium>
//! detach <port>                # logic detach, no flush
//! eject <port>                 # flush, then detach
//! crash-at <port> after-data|after-nodes|after-signature
//! host-read <port> <lba>
//! host-write <port> <lba> <payload>
//! raw-write <medium> <region> <offset> xor=<hh>|<payload>
//! snapshot <medium> <name>
//! restore <medium> <name> [ads-only]
//! human-input <port> answer | type <text> | click <x> <y>
//! device-type <port> <text> | guess
//! device-send <port> <hex report>
//! tick <ms>
//! flush <port>
//! cs up|down
//! revoke mediator|formatter
//! operator <id> <secret>
//! policy <rule>
//! transfer <operator> <secret> <port> <name> <payload>
//! expect ...
//! ```
//!
//! Payloads are `text=<s>` (zero padded to a block where one is needed),
//! `hex=<bytes>`, `fill=<hh>` (a whole block) or `random=<n>`. Regions for
//! raw writes are `block:<lba>`, `node:<i>`, `signature`, `certificate`,
//! `ads-header` and `byte` (absolute offset).
//!
//! Expectations:
//!
//! ```text
//! expect state <port> <Empty|Enumerating|Authorizing|Authorized|Blocked> [reason]
//! expect io ok|tamper|out-of-range|inhibited|bad-length|io|unavailable
//! expect data <payload>
//! expect host-reports <port> <n>
//! expect attempts <port> <n>
//! expect display <text...>
//! expect led blink-green|fixed-green|blink-red|off
//! expect audit <n>
//! expect transfer ok|policy-deny|session-blocked|denied|rejected
//! expect file <port> <name> <payload>
//! expect dirty <port> yes|no
//! expect cs-version <medium> <n>|none
//! expect anomaly <text...>
//! expect safety
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::cs::{LocalRegistry, RootRegistry};
use crate::gatekeeper::{
    read_volume, AuditLog, Gatekeeper, OperatorRegistry, Policy, Rejected, Rule, Transferred,
};
use crate::hid::{AuthStatus, Challenge, Point, ALPHABET, CODE_LEN, MOUSE_PAIRS};
use crate::image::{
    authorize_rsd, format_memory, FormatOptions, RsdId, RsdImage, STANDARD_BLOCK_SIZES,
};
use crate::integrity::CrashPoint;
use crate::provision::{Fixture, CS_TOKEN};
use crate::router::{DownLed, Endpoint, PortState, Router, RouterConfig};
use crate::trace::{check_safety, TraceEvent};
use crate::usb::{keyboard_report, mouse_report, DeviceDescriptor, IoStatus, UsbMessage};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("scenario line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub seed: u64,
    pub cs: bool,
    pub ports: u8,
    pub flush_interval_ms: u64,
}

impl Default for Header {
    fn default() -> Self {
        Header {
            seed: 0,
            cs: false,
            ports: 1,
            flush_interval_ms: crate::integrity::DEFAULT_FLUSH_INTERVAL_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Text(String),
    Hex(Vec<u8>),
    Fill(u8),
    Random(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachKind {
    Keyboard,
    Mouse,
    Printer,
    Storage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Region {
    Block(u64),
    Node(u64),
    Signature,
    Certificate,
    AdsHeader,
    Byte,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawData {
    Xor(u8),
    Bytes(Payload),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HumanInput {
    Answer,
    Type(String),
    Click(Point),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceKeys {
    Text(String),
    Guess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IoExpect {
    Ok,
    Err(IoStatus),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferExpect {
    Ok,
    PolicyDeny,
    SessionBlocked,
    Denied,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expectation {
    State {
        port: u8,
        state: PortState,
        reason: Option<String>,
    },
    Io(IoExpect),
    Data(Payload),
    HostReports {
        port: u8,
        count: usize,
    },
    Attempts {
        port: u8,
        count: u32,
    },
    Display(String),
    Led(DownLed),
    Audit(usize),
    Transfer(TransferExpect),
    File {
        port: u8,
        name: String,
        payload: Payload,
    },
    Dirty {
        port: u8,
        dirty: bool,
    },
    CsVersion {
        medium: String,
        version: Option<u64>,
    },
    Anomaly(String),
    Safety,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Format {
        medium: String,
        blocks: u64,
        block_size: u32,
        shift: u32,
    },
    Attach {
        port: u8,
        kind: AttachKind,
        medium: Option<String>,
    },
    Detach(u8),
    Eject(u8),
    Crash {
        port: u8,
        point: CrashPoint,
    },
    HostRead {
        port: u8,
        lba: u64,
    },
    HostWrite {
        port: u8,
        lba: u64,
        data: Payload,
    },
    RawWrite {
        medium: String,
        region: Region,
        offset: u64,
        data: RawData,
    },
    Snapshot {
        medium: String,
        name: String,
    },
    Restore {
        medium: String,
        name: String,
        ads_only: bool,
    },
    HumanInput {
        port: u8,
        input: HumanInput,
    },
    DeviceType {
        port: u8,
        keys: DeviceKeys,
    },
    DeviceSend {
        port: u8,
        report: Vec<u8>,
    },
    Tick(u64),
    Flush(u8),
    Cs(bool),
    Revoke(Identity),
    Operator {
        id: String,
        secret: String,
    },
    Policy(Rule),
    Transfer {
        operator: String,
        secret: String,
        port: u8,
        name: String,
        data: Payload,
    },
    Expect(Expectation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Identity {
    Mediator,
    Formatter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub header: Header,
    /// Steps with their 1-based source lines.
    pub steps: Vec<(usize, Step)>,
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad {what} {s:?}"))
}

fn parse_hex_byte(s: &str) -> Result<u8, String> {
    u8::from_str_radix(s, 16).map_err(|_| format!("bad byte {s:?}"))
}

fn parse_payload(s: &str) -> Result<Payload, String> {
    let (kind, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected payload, got {s:?}"))?;
    Ok(match kind {
        "text" => Payload::Text(value.to_owned()),
        "hex" => Payload::Hex(hex::decode(value).map_err(|e| format!("bad hex: {e}"))?),
        "fill" => Payload::Fill(parse_hex_byte(value)?),
        "random" => Payload::Random(num(value, "length")?),
        other => return Err(format!("unknown payload kind {other:?}")),
    })
}

fn parse_state(s: &str) -> Result<PortState, String> {
    Ok(match s {
        "Empty" => PortState::Empty,
        "Enumerating" => PortState::Enumerating,
        "Authorizing" => PortState::Authorizing,
        "Authorized" => PortState::Authorized,
        "Blocked" => PortState::Blocked,
        other => return Err(format!("unknown state {other:?}")),
    })
}

fn parse_io_status(s: &str) -> Result<IoStatus, String> {
    [
        IoStatus::Tamper,
        IoStatus::OutOfRange,
        IoStatus::Inhibited,
        IoStatus::BadLength,
        IoStatus::Io,
        IoStatus::Unavailable,
    ]
    .into_iter()
    .find(|st| st.name() == s)
    .ok_or_else(|| format!("unknown I/O status {s:?}"))
}

fn parse_region(s: &str) -> Result<Region, String> {
    Ok(match s.split_once(':') {
        Some(("block", n)) => Region::Block(num(n, "block")?),
        Some(("node", n)) => Region::Node(num(n, "node")?),
        None if s == "signature" => Region::Signature,
        None if s == "certificate" => Region::Certificate,
        None if s == "ads-header" => Region::AdsHeader,
        None if s == "byte" => Region::Byte,
        _ => return Err(format!("unknown region {s:?}")),
    })
}

fn parse_options(words: &[&str]) -> Result<HashMap<String, String>, String> {
    words
        .iter()
        .map(|w| {
            w.split_once('=')
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .ok_or_else(|| format!("expected key=value, got {w:?}"))
        })
        .collect()
}

fn parse_expect(w: &[&str], rest: &str) -> Result<Expectation, String> {
    let port = |s: &str| num::<u8>(s, "port");
    Ok(match w {
        ["state", p, s] => Expectation::State {
            port: port(p)?,
            state: parse_state(s)?,
            reason: None,
        },
        ["state", p, s, r] => Expectation::State {
            port: port(p)?,
            state: parse_state(s)?,
            reason: Some((*r).to_owned()),
        },
        ["io", "ok"] => Expectation::Io(IoExpect::Ok),
        ["io", s] => Expectation::Io(IoExpect::Err(parse_io_status(s)?)),
        ["data", p] => Expectation::Data(parse_payload(p)?),
        ["host-reports", p, n] => Expectation::HostReports {
            port: port(p)?,
            count: num(n, "count")?,
        },
        ["attempts", p, n] => Expectation::Attempts {
            port: port(p)?,
            count: num(n, "count")?,
        },
        ["display", _, ..] => Expectation::Display(rest.to_owned()),
        ["led", l] => Expectation::Led(match *l {
            "blink-green" => DownLed::BlinkGreen,
            "fixed-green" => DownLed::FixedGreen,
            "blink-red" => DownLed::BlinkRed,
            "off" => DownLed::Off,
            other => return Err(format!("unknown LED state {other:?}")),
        }),
        ["audit", n] => Expectation::Audit(num(n, "count")?),
        ["transfer", t] => Expectation::Transfer(match *t {
            "ok" => TransferExpect::Ok,
            "policy-deny" => TransferExpect::PolicyDeny,
            "session-blocked" => TransferExpect::SessionBlocked,
            "denied" => TransferExpect::Denied,
            "rejected" => TransferExpect::Rejected,
            other => return Err(format!("unknown transfer outcome {other:?}")),
        }),
        ["file", p, name, data] => Expectation::File {
            port: port(p)?,
            name: (*name).to_owned(),
            payload: parse_payload(data)?,
        },
        ["dirty", p, d] => Expectation::Dirty {
            port: port(p)?,
            dirty: match *d {
                "yes" => true,
                "no" => false,
                other => return Err(format!("expected yes or no, got {other:?}")),
            },
        },
        ["cs-version", m, v] => Expectation::CsVersion {
            medium: (*m).to_owned(),
            version: if *v == "none" {
                None
            } else {
                Some(num(v, "version")?)
            },
        },
        ["anomaly", _, ..] => Expectation::Anomaly(rest.to_owned()),
        ["safety"] => Expectation::Safety,
        _ => return Err(format!("malformed expectation {:?}", w.join(" "))),
    })
}

fn parse_step(w: &[&str]) -> Result<Step, String> {
    let port = |s: &str| num::<u8>(s, "port");
    let rest_after = |n: usize| w[n..].join(" ");
    Ok(match w {
        ["format", medium, opts @ ..] => {
            let mut o = parse_options(opts)?;
            let blocks = num(&o.remove("blocks").ok_or("format needs blocks=")?, "blocks")?;
            let block_size = num(
                &o.remove("bs").unwrap_or_else(|| "512".into()),
                "block size",
            )?;
            let shift = num(&o.remove("shift").unwrap_or_else(|| "1".into()), "shift")?;
            if let Some(k) = o.keys().next() {
                return Err(format!("unknown format option {k:?}"));
            }
            Step::Format {
                medium: (*medium).to_owned(),
                blocks,
                block_size,
                shift,
            }
        }
        ["attach", p, kind, more @ ..] => {
            let kind = match *kind {
                "keyboard" => AttachKind::Keyboard,
                "mouse" => AttachKind::Mouse,
                "printer" => AttachKind::Printer,
                "storage" => AttachKind::Storage,
                other => return Err(format!("unknown device kind {other:?}")),
            };
            let medium = match (kind, more) {
                (AttachKind::Storage, [m]) => Some((*m).to_owned()),
                (AttachKind::Storage, []) => None,
                (_, []) => None,
                _ => return Err("only storage takes a medium".into()),
            };
            Step::Attach {
                port: port(p)?,
                kind,
                medium,
            }
        }
        ["detach", p] => Step::Detach(port(p)?),
        ["eject", p] => Step::Eject(port(p)?),
        ["crash-at", p, point] => Step::Crash {
            port: port(p)?,
            point: CrashPoint::from_token(point)
                .ok_or_else(|| format!("unknown crash point {point:?}"))?,
        },
        ["host-read", p, lba] => Step::HostRead {
            port: port(p)?,
            lba: num(lba, "lba")?,
        },
        ["host-write", p, lba, data] => Step::HostWrite {
            port: port(p)?,
            lba: num(lba, "lba")?,
            data: parse_payload(data)?,
        },
        ["raw-write", medium, region, offset, data] => Step::RawWrite {
            medium: (*medium).to_owned(),
            region: parse_region(region)?,
            offset: num(offset, "offset")?,
            data: match data.strip_prefix("xor=") {
                Some(x) => RawData::Xor(parse_hex_byte(x)?),
                None => RawData::Bytes(parse_payload(data)?),
            },
        },
        ["snapshot", medium, name] => Step::Snapshot {
            medium: (*medium).to_owned(),
            name: (*name).to_owned(),
        },
        ["restore", medium, name] => Step::Restore {
            medium: (*medium).to_owned(),
            name: (*name).to_owned(),
            ads_only: false,
        },
        ["restore", medium, name, "ads-only"] => Step::Restore {
            medium: (*medium).to_owned(),
            name: (*name).to_owned(),
            ads_only: true,
        },
        ["human-input", p, "answer"] => Step::HumanInput {
            port: port(p)?,
            input: HumanInput::Answer,
        },
        ["human-input", p, "type", _, ..] => Step::HumanInput {
            port: port(p)?,
            input: HumanInput::Type(rest_after(3)),
        },
        ["human-input", p, "click", x, y] => Step::HumanInput {
            port: port(p)?,
            input: HumanInput::Click(Point {
                x: num(x, "x")?,
                y: num(y, "y")?,
            }),
        },
        ["device-type", p, "guess"] => Step::DeviceType {
            port: port(p)?,
            keys: DeviceKeys::Guess,
        },
        ["device-type", p, _, ..] => Step::DeviceType {
            port: port(p)?,
            keys: DeviceKeys::Text(rest_after(2)),
        },
        ["device-send", p, h] => Step::DeviceSend {
            port: port(p)?,
            report: hex::decode(h).map_err(|e| format!("bad hex: {e}"))?,
        },
        ["tick", ms] => Step::Tick(num(ms, "milliseconds")?),
        ["flush", p] => Step::Flush(port(p)?),
        ["cs", "up"] => Step::Cs(true),
        ["cs", "down"] => Step::Cs(false),
        ["revoke", "mediator"] => Step::Revoke(Identity::Mediator),
        ["revoke", "formatter"] => Step::Revoke(Identity::Formatter),
        ["operator", id, secret] => Step::Operator {
            id: (*id).to_owned(),
            secret: (*secret).to_owned(),
        },
        ["policy", ..] => {
            let p = Policy::parse(&rest_after(1)).map_err(|e| e.message)?;
            match p.rules() {
                [r] => Step::Policy(r.clone()),
                _ => return Err("policy needs exactly one rule".into()),
            }
        }
        ["transfer", op, secret, p, name, data] => Step::Transfer {
            operator: (*op).to_owned(),
            secret: (*secret).to_owned(),
            port: port(p)?,
            name: (*name).to_owned(),
            data: parse_payload(data)?,
        },
        ["expect", rest @ ..] => {
            Step::Expect(parse_expect(rest, &rest.get(1..).unwrap_or(&[]).join(" "))?)
        }
        _ => return Err(format!("unknown step {:?}", w.join(" "))),
    })
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut header = Header::default();
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| ScenarioError { line, message };
            let words: Vec<&str> = content.split_whitespace().collect();
            let header_value = |w: &[&str]| -> Result<String, ScenarioError> {
                match w {
                    [_, v] => Ok((*v).to_owned()),
                    _ => Err(err(format!("{} takes one value", w[0]))),
                }
            };
            let is_header =
                matches!(words[0], "seed" | "ports" | "flush-interval") || words == ["cs"];
            if is_header {
                if !steps.is_empty() {
                    return Err(err(format!(
                        "header line {:?} after the first step",
                        words[0]
                    )));
                }
                match words[0] {
                    "seed" => header.seed = num(&header_value(&words)?, "seed").map_err(err)?,
                    "ports" => {
                        header.ports = num(&header_value(&words)?, "port count").map_err(err)?;
                        if header.ports == 0 {
                            return Err(err("at least one port".into()));
                        }
                    }
                    "flush-interval" => {
                        header.flush_interval_ms =
                            num(&header_value(&words)?, "interval").map_err(err)?
                    }
                    _ => header.cs = true,
                }
                continue;
            }
            steps.push((line, parse_step(&words).map_err(err)?));
        }
        Ok(Scenario { header, steps })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| ScenarioError {
            line: 0,
            message: format!("{}: {e}", path.as_ref().display()),
        })?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepFailure {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub steps_run: usize,
    pub expectations_checked: usize,
    pub failure: Option<StepFailure>,
    pub trace: Vec<TraceEvent>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

type IoResult = Result<Option<Vec<u8>>, IoStatus>;

/// A mediator with its media, a host, the humans, and optionally a
/// coordination service and a gatekeeper.
pub struct Simulator {
    fixture: Fixture,
    registry: Option<Arc<LocalRegistry>>,
    router: Router,
    gatekeeper: Gatekeeper,
    rules: Vec<Rule>,
    shelf: BTreeMap<String, RsdImage>,
    attached: BTreeMap<u8, String>,
    snapshots: HashMap<String, Vec<u8>>,
    rng: ChaCha20Rng,
    host: Vec<(u8, UsbMessage)>,
    last_io: Option<IoResult>,
    last_transfer: Option<Result<Transferred, Rejected>>,
}

impl Simulator {
    pub fn new(header: &Header) -> Self {
        let fixture = Fixture::from_seed(header.seed);
        let registry = header.cs.then(|| {
            Arc::new(LocalRegistry::new(
                Arc::new(fixture.cs_store()),
                Some(CS_TOKEN),
            ))
        });
        let mut config = RouterConfig::new(fixture.anchor(), fixture.mediator.clone());
        config.ports = header.ports;
        config.seed = header.seed ^ 0x5eed;
        config.flush_interval_ms = header.flush_interval_ms;
        config.registry = registry.clone().map(|r| r as Arc<dyn RootRegistry>);
        Simulator {
            router: Router::new(config),
            fixture,
            registry,
            gatekeeper: Gatekeeper::new(
                OperatorRegistry::new(),
                Policy::default(),
                AuditLog::new(),
            ),
            rules: Vec::new(),
            shelf: BTreeMap::new(),
            attached: BTreeMap::new(),
            snapshots: HashMap::new(),
            rng: ChaCha20Rng::seed_from_u64(header.seed ^ 0x9e55),
            host: Vec::new(),
            last_io: None,
            last_transfer: None,
        }
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn gatekeeper(&self) -> &Gatekeeper {
        &self.gatekeeper
    }

    /// Everything the host has received, in order.
    pub fn host_messages(&self) -> &[(u8, UsbMessage)] {
        &self.host
    }

    pub fn medium(&mut self, name: &str) -> Option<&mut RsdImage> {
        self.shelf.get_mut(name)
    }

    fn drain(&mut self) -> Vec<UsbMessage> {
        let mut replies = Vec::new();
        for d in self.router.take_outbox() {
            if d.to == Endpoint::Host {
                replies.push(d.message.clone());
                self.host.push((d.port, d.message));
            }
        }
        replies
    }

    fn device(&mut self, port: u8, msg: UsbMessage) {
        self.router.on_device_message(port, msg);
        self.drain();
    }

    fn press(&mut self, port: u8, c: char) {
        self.device(port, UsbMessage::HidReport(keyboard_report(Some(c))));
        self.device(port, UsbMessage::HidReport(keyboard_report(None)));
    }

    fn click(&mut self, port: u8, at: Point) -> Result<(), String> {
        let from = self.router.pointer(port).ok_or("no mouse on that port")?;
        let dx = i16::try_from(at.x - from.x).map_err(|_| "move too far")?;
        let dy = i16::try_from(at.y - from.y).map_err(|_| "move too far")?;
        self.device(port, UsbMessage::HidReport(mouse_report(0, dx, dy)));
        self.device(port, UsbMessage::HidReport(mouse_report(1, 0, 0)));
        self.device(port, UsbMessage::HidReport(mouse_report(0, 0, 0)));
        Ok(())
    }

    fn payload_bytes(&mut self, p: &Payload, block: Option<usize>) -> Result<Vec<u8>, String> {
        let mut bytes = match p {
            Payload::Text(t) => t.as_bytes().to_vec(),
            Payload::Hex(h) => h.clone(),
            Payload::Fill(b) => vec![*b; block.ok_or("fill= needs a block context")?],
            Payload::Random(n) => {
                let mut v = vec![0u8; *n];
                self.rng.fill_bytes(&mut v);
                v
            }
        };
        if let Some(b) = block {
            if bytes.len() > b {
                return Err(format!(
                    "payload of {} bytes exceeds the {b}-byte block",
                    bytes.len()
                ));
            }
            bytes.resize(b, 0);
        }
        Ok(bytes)
    }

    fn take_medium(&mut self, name: &str) -> Result<RsdImage, String> {
        self.shelf
            .remove(name)
            .ok_or_else(|| format!("medium {name:?} is not on the shelf"))
    }

    fn return_medium(&mut self, port: u8, image: Option<RsdImage>) {
        if let Some(name) = self.attached.remove(&port) {
            if let Some(img) = image {
                self.shelf.insert(name, img);
            }
        }
    }

    /// Executes one step. Expectations return `Err` when violated.
    pub fn step(&mut self, step: &Step) -> Result<(), String> {
        match step {
            Step::Format {
                medium,
                blocks,
                block_size,
                shift,
            } => {
                if self.attached.values().any(|m| m == medium) {
                    return Err(format!("medium {medium:?} is attached"));
                }
                let id = RsdId::new(medium).map_err(|e| e.to_string())?;
                let mut opts = FormatOptions::new(id, *blocks, *block_size);
                opts.shift = *shift;
                opts.allow_small_blocks = !STANDARD_BLOCK_SIZES.contains(block_size);
                let image =
                    format_memory(&opts, &self.fixture.formatter).map_err(|e| e.to_string())?;
                self.shelf.insert(medium.clone(), image);
            }
            Step::Attach { port, kind, medium } => {
                let (descriptor, image) = match kind {
                    AttachKind::Keyboard => (DeviceDescriptor::keyboard("kbd"), None),
                    AttachKind::Mouse => (DeviceDescriptor::mouse("mouse"), None),
                    AttachKind::Printer => (DeviceDescriptor::printer("printer"), None),
                    AttachKind::Storage => match medium {
                        Some(m) => (
                            DeviceDescriptor::mass_storage(m),
                            Some(self.take_medium(m)?),
                        ),
                        None => (DeviceDescriptor::mass_storage("empty-reader"), None),
                    },
                };
                match self.router.attach(*port, descriptor, image) {
                    Ok(()) => {
                        if let Some(m) = medium {
                            self.attached.insert(*port, m.clone());
                        }
                    }
                    Err(back) => {
                        if let (Some(m), Some(img)) = (medium, back) {
                            self.shelf.insert(m.clone(), img);
                        }
                    }
                }
                self.drain();
            }
            Step::Detach(port) => {
                let img = self.router.on_logic_detach(*port);
                self.drain();
                self.return_medium(*port, img);
            }
            Step::Eject(port) => {
                let img = self.router.eject(*port);
                self.drain();
                self.return_medium(*port, img);
            }
            Step::Crash { port, point } => {
                let img = self.router.crash(*port, *point);
                self.drain();
                self.return_medium(*port, img);
            }
            Step::HostRead { port, lba } => {
                self.router
                    .on_host_message(*port, UsbMessage::BlockRead { lba: *lba });
                self.last_io = match self.drain().pop() {
                    Some(UsbMessage::BlockReadReply(r)) => Some(r.map(Some)),
                    other => return Err(format!("no read reply, got {other:?}")),
                };
            }
            Step::HostWrite { port, lba, data } => {
                let b = self.router.session(*port).map_or(512, |s| s.block_size());
                let data = self.payload_bytes(data, Some(b))?;
                self.router
                    .on_host_message(*port, UsbMessage::BlockWrite { lba: *lba, data });
                self.last_io = match self.drain().pop() {
                    Some(UsbMessage::WriteReply(r)) => Some(r.map(|()| None)),
                    other => return Err(format!("no write reply, got {other:?}")),
                };
            }
            Step::RawWrite {
                medium,
                region,
                offset,
                data,
            } => {
                let payload = match data {
                    RawData::Bytes(p) => Some(self.payload_bytes(p, None)?),
                    RawData::Xor(_) => None,
                };
                let image = self
                    .shelf
                    .get_mut(medium)
                    .ok_or_else(|| format!("medium {medium:?} is not on the shelf"))?;
                let base = match region {
                    Region::Byte => 0,
                    other => {
                        let layout = authorize_rsd(image).map_err(|e| e.to_string())?;
                        let b = layout.block_size() as u64;
                        match other {
                            Region::Block(lba) => layout.physical_block(*lba) * b,
                            Region::Node(i) => layout.nodes_offset() + 32 * i,
                            Region::Signature => layout.signature_offset(),
                            Region::Certificate => layout.certificate_offset(),
                            Region::AdsHeader => layout.ads().start * b,
                            Region::Byte => unreachable!(),
                        }
                    }
                };
                let at = base + offset;
                let bytes = match (data, payload) {
                    (RawData::Xor(x), _) => {
                        let mut cur = [0u8];
                        image.read_at(at, &mut cur).map_err(|e| e.to_string())?;
                        vec![cur[0] ^ x]
                    }
                    (_, Some(p)) => p,
                    _ => unreachable!(),
                };
                image.write_at(at, &bytes).map_err(|e| e.to_string())?;
            }
            Step::Snapshot { medium, name } => {
                let image = self
                    .shelf
                    .get_mut(medium)
                    .ok_or_else(|| format!("medium {medium:?} is not on the shelf"))?;
                let bytes = image.to_bytes().map_err(|e| e.to_string())?;
                self.snapshots.insert(name.clone(), bytes);
            }
            Step::Restore {
                medium,
                name,
                ads_only,
            } => {
                let snap = self
                    .snapshots
                    .get(name)
                    .ok_or_else(|| format!("no snapshot {name:?}"))?;
                let image = self
                    .shelf
                    .get_mut(medium)
                    .ok_or_else(|| format!("medium {medium:?} is not on the shelf"))?;
                if *ads_only {
                    let layout = authorize_rsd(image).map_err(|e| e.to_string())?;
                    let b = layout.block_size() as u64;
                    let ads = layout.ads();
                    let range = (ads.start * b) as usize..(ads.end() * b) as usize;
                    let part = snap.get(range.clone()).ok_or("snapshot too short")?;
                    image
                        .write_at(range.start as u64, part)
                        .map_err(|e| e.to_string())?;
                } else {
                    image.overwrite(snap).map_err(|e| e.to_string())?;
                }
            }
            Step::HumanInput { port, input } => match input {
                HumanInput::Answer => {
                    let auth = self
                        .router
                        .authorizator(*port)
                        .filter(|a| a.status() == AuthStatus::InProgress)
                        .ok_or("no captcha in progress on that port")?;
                    match *auth.challenge() {
                        Challenge::Keyboard(code) => {
                            let from = auth.progress();
                            for &c in &code.symbols()[from..] {
                                self.press(*port, c as char);
                            }
                        }
                        Challenge::Mouse(m) => {
                            let from = auth.progress();
                            for k in from..2 * MOUSE_PAIRS {
                                self.click(*port, m.element(k).center())?;
                            }
                        }
                    }
                }
                HumanInput::Type(text) => {
                    for c in text.chars() {
                        self.press(*port, c);
                    }
                }
                HumanInput::Click(p) => self.click(*port, *p)?,
            },
            Step::DeviceType { port, keys } => {
                let text: String = match keys {
                    DeviceKeys::Text(t) => t.clone(),
                    DeviceKeys::Guess => (0..CODE_LEN)
                        .map(|_| ALPHABET[self.rng.gen_range(0..ALPHABET.len())] as char)
                        .collect(),
                };
                for c in text.chars() {
                    self.press(*port, c);
                }
            }
            Step::DeviceSend { port, report } => {
                self.device(*port, UsbMessage::HidReport(report.clone()));
            }
            Step::Tick(ms) => {
                let now = self.router.now_ms() + ms;
                self.router.on_tick(now);
                self.drain();
            }
            Step::Flush(port) => {
                self.router.flush(*port);
            }
            Step::Cs(online) => self
                .registry
                .as_ref()
                .ok_or("scenario runs without a coordination service")?
                .set_online(*online),
            Step::Revoke(who) => {
                let serial = match who {
                    Identity::Mediator => self.fixture.mediator.certificate().serial(),
                    Identity::Formatter => self.fixture.formatter.certificate().serial(),
                };
                let list = self.fixture.revoke(serial);
                match &self.registry {
                    Some(r) => r
                        .store()
                        .publish_revocation_list(list)
                        .map_err(|e| e.to_string())?,
                    None => self
                        .router
                        .anchor_mut()
                        .accept(list)
                        .map_err(|e| e.to_string())?,
                }
            }
            Step::Operator { id, secret } => self.gatekeeper.operators_mut().register(id, secret),
            Step::Policy(rule) => {
                self.rules.push(rule.clone());
                self.gatekeeper.set_policy(Policy::new(self.rules.clone()));
            }
            Step::Transfer {
                operator,
                secret,
                port,
                name,
                data,
            } => {
                let bytes = self.payload_bytes(data, None)?;
                let now = self.router.now_ms();
                let outcome = match self.gatekeeper.authenticate(operator, secret, now) {
                    Err(e) => Err(e),
                    Ok(op) => {
                        let authorized = self.router.port_state(*port) == PortState::Authorized;
                        let target = self.router.session_mut(*port).filter(|_| authorized);
                        self.gatekeeper.transfer(&op, name, &bytes, target, now)
                    }
                };
                self.last_transfer = Some(outcome);
            }
            Step::Expect(e) => self.check(e)?,
        }
        Ok(())
    }

    fn check(&mut self, e: &Expectation) -> Result<(), String> {
        let fail = |want: String, got: String| Err(format!("expected {want}, got {got}"));
        match e {
            Expectation::State {
                port,
                state,
                reason,
            } => {
                let got = self.router.port_state(*port);
                let got_reason = self.router.block_reason(*port);
                if got != *state || (reason.is_some() && reason.as_deref() != got_reason) {
                    let r = |s: Option<&str>| s.map(|s| format!(" {s}")).unwrap_or_default();
                    return fail(
                        format!("state {state}{}", r(reason.as_deref())),
                        format!("{got}{}", r(got_reason)),
                    );
                }
            }
            Expectation::Io(want) => {
                let got = self.last_io.as_ref().ok_or("no host I/O yet")?;
                let ok = match (want, got) {
                    (IoExpect::Ok, Ok(_)) => true,
                    (IoExpect::Err(w), Err(g)) => w == g,
                    _ => false,
                };
                if !ok {
                    let show = |r: &IoResult| match r {
                        Ok(_) => "ok".to_string(),
                        Err(s) => s.name().to_string(),
                    };
                    let want = match want {
                        IoExpect::Ok => "ok".to_string(),
                        IoExpect::Err(s) => s.name().to_string(),
                    };
                    return fail(format!("io {want}"), show(got));
                }
            }
            Expectation::Data(p) => {
                let got = match &self.last_io {
                    Some(Ok(Some(d))) => d.clone(),
                    other => return Err(format!("no read data, last I/O was {other:?}")),
                };
                let want = self.payload_bytes(p, Some(got.len()))?;
                if got != want {
                    return fail(hex_prefix(&want), hex_prefix(&got));
                }
            }
            Expectation::HostReports { port, count } => {
                let got = self
                    .host
                    .iter()
                    .filter(|(p, m)| p == port && matches!(m, UsbMessage::HidReport(_)))
                    .count();
                if got != *count {
                    return fail(format!("{count} reports at the host"), got.to_string());
                }
            }
            Expectation::Attempts { port, count } => {
                let got = self
                    .router
                    .authorizator(*port)
                    .ok_or("no authorizator on that port")?
                    .attempts_used();
                if got != *count {
                    return fail(format!("{count} attempts"), got.to_string());
                }
            }
            Expectation::Display(text) => {
                let shown = self.router.panel().display_text;
                if !shown.replace('\n', " ").contains(text.as_str()) {
                    return fail(format!("display containing {text:?}"), format!("{shown:?}"));
                }
            }
            Expectation::Led(want) => {
                let got = self.router.panel().down_led;
                if got != *want {
                    return fail(format!("{want:?}"), format!("{got:?}"));
                }
            }
            Expectation::Audit(n) => {
                let got = self.gatekeeper.audit().records().len();
                if got != *n {
                    return fail(format!("{n} audit records"), got.to_string());
                }
            }
            Expectation::Transfer(want) => {
                let got = self.last_transfer.as_ref().ok_or("no transfer yet")?;
                let ok = matches!(
                    (want, got),
                    (TransferExpect::Ok, Ok(_))
                        | (TransferExpect::PolicyDeny, Err(Rejected::PolicyDeny(_)))
                        | (
                            TransferExpect::SessionBlocked,
                            Err(Rejected::SessionBlocked)
                        )
                        | (TransferExpect::Denied, Err(Rejected::Denied))
                        | (TransferExpect::Rejected, Err(_))
                );
                if !ok {
                    return fail(format!("transfer {want:?}"), format!("{got:?}"));
                }
            }
            Expectation::File {
                port,
                name,
                payload,
            } => {
                let want = self.payload_bytes(payload, None)?;
                let session = self
                    .router
                    .session_mut(*port)
                    .ok_or("no authorized medium on that port")?;
                let files = read_volume(session).map_err(|e| e.to_string())?;
                let file = files
                    .iter()
                    .rev()
                    .find(|f| f.name == *name)
                    .ok_or_else(|| format!("no file {name:?} in the packed volume"))?;
                if file.bytes != want {
                    return fail(hex_prefix(&want), hex_prefix(&file.bytes));
                }
            }
            Expectation::Dirty { port, dirty } => {
                let got = self
                    .router
                    .session(*port)
                    .ok_or("no session on that port")?
                    .is_dirty();
                if got != *dirty {
                    return fail(format!("dirty={dirty}"), format!("dirty={got}"));
                }
            }
            Expectation::CsVersion { medium, version } => {
                let reg = self
                    .registry
                    .as_ref()
                    .ok_or("scenario runs without a coordination service")?;
                let got = reg.store().get_root(medium).map(|r| r.version);
                if got != *version {
                    return fail(format!("{version:?}"), format!("{got:?}"));
                }
            }
            Expectation::Anomaly(text) => {
                if !self
                    .router
                    .trace()
                    .iter()
                    .any(|e| e.variant == "Anomaly" && e.summary.contains(text.as_str()))
                {
                    return Err(format!("no anomaly mentioning {text:?}"));
                }
            }
            Expectation::Safety => check_safety(self.router.trace()).map_err(|v| v.to_string())?,
        }
        Ok(())
    }
}

fn hex_prefix(b: &[u8]) -> String {
    let shown = &b[..b.len().min(16)];
    let more = if b.len() > 16 { "..." } else { "" };
    format!("{}{more} ({} bytes)", hex::encode(shown), b.len())
}

/// Runs a parsed scenario on a fresh simulator. The run stops at the first
/// failed step; the trace monitor is applied to whatever ran.
pub fn run(scenario: &Scenario) -> Outcome {
    let mut sim = Simulator::new(&scenario.header);
    let mut failure = None;
    let mut steps_run = 0;
    let mut expectations_checked = 0;
    for (line, step) in &scenario.steps {
        steps_run += 1;
        if matches!(step, Step::Expect(_)) {
            expectations_checked += 1;
        }
        if let Err(message) = sim.step(step) {
            failure = Some(StepFailure {
                line: *line,
                message,
            });
            break;
        }
    }
    if failure.is_none() {
        if let Err(v) = check_safety(sim.router.trace()) {
            failure = Some(StepFailure {
                line: scenario.steps.last().map_or(0, |s| s.0),
                message: v.to_string(),
            });
        }
    }
    Outcome {
        steps_run,
        expectations_checked,
        failure,
        trace: sim.router.trace().to_vec(),
    }
}

pub fn run_text(text: &str) -> Result<Outcome, ScenarioError> {
    Ok(run(&Scenario::parse(text)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_scenario_passes() {
        let o = run_text("").unwrap();
        assert!(o.passed());
        assert_eq!(o.steps_run, 0);
        assert!(run_text("# nothing\n\nseed 3\n").unwrap().passed());
    }

    #[test]
    fn parse_errors_carry_lines() {
        let e = Scenario::parse("seed 1\nformat m blocks=8\nfrobnicate\n").unwrap_err();
        assert_eq!(e.line, 3);
        let e = Scenario::parse("format m blocks=8\nseed 2\n").unwrap_err();
        assert_eq!(e.line, 2);
        for bad in [
            "format m",
            "attach 0 toaster",
            "attach 0 keyboard m",
            "host-write 0 1 fill=zz",
            "expect state 0 Happy",
            "expect io lost",
            "raw-write m nowhere 0 xor=01",
            "crash-at 0 after-lunch",
            "policy ALLOW size < 4",
            "attach 300 keyboard",
        ] {
            assert!(Scenario::parse(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn failed_expectation_names_its_line() {
        let o =
            run_text("format m blocks=4\nattach 0 storage m\nexpect state 0 Blocked\n").unwrap();
        let f = o.failure.unwrap();
        assert_eq!(f.line, 3);
        assert!(f.message.contains("Authorized"), "{}", f.message);
    }

    #[test]
    fn write_read_round_trip() {
        let o = run_text(
            "format m blocks=8 bs=512\nattach 0 storage m\nhost-write 0 3 text=hello\n\
             expect io ok\nexpect dirty 0 yes\nhost-read 0 3\nexpect data text=hello\n\
             eject 0\nattach 0 storage m\nhost-read 0 3\nexpect data text=hello\nexpect led fixed-green\n",
        )
        .unwrap();
        assert!(o.passed(), "{:?}", o.failure);
    }

    #[test]
    fn keyboard_answer_authorizes_and_forwards() {
        let o = run_text(
            "attach 0 keyboard\nexpect state 0 Authorizing\nexpect led blink-green\n\
             device-type 0 !\nexpect host-reports 0 0\nexpect attempts 0 1\n\
             human-input 0 answer\nexpect state 0 Authorized\n\
             # the release of the last captcha key arrives after authorization
             expect host-reports 0 1\ndevice-type 0 ab\nexpect host-reports 0 5\nexpect display Device authorized.\n",
        )
        .unwrap();
        assert!(o.passed(), "{:?}", o.failure);
    }

    #[test]
    fn mouse_answer_authorizes() {
        let o =
            run_text("seed 4\nattach 0 mouse\nhuman-input 0 answer\nexpect state 0 Authorized\n")
                .unwrap();
        assert!(o.passed(), "{:?}", o.failure);
    }

    proptest! {
        #[test]
        fn parser_never_panics(s in "\\PC{0,120}") {
            let _ = Scenario::parse(&s);
        }
    }
}
