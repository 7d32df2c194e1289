//! Event traces of the mediator: one line per event,
//! `<t> <port> <direction> <variant> <summary>`.
//!
//! Directions are `D>U` (device to mediator), `U>D`, `H>U` (host to
//! mediator), `U>H` and `U` for internal events such as state changes.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    DeviceToMediator,
    MediatorToDevice,
    HostToMediator,
    MediatorToHost,
    Internal,
}

impl Direction {
    pub const ALL: [Direction; 5] = [
        Direction::DeviceToMediator,
        Direction::MediatorToDevice,
        Direction::HostToMediator,
        Direction::MediatorToHost,
        Direction::Internal,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Direction::DeviceToMediator => "D>U",
            Direction::MediatorToDevice => "U>D",
            Direction::HostToMediator => "H>U",
            Direction::MediatorToHost => "U>H",
            Direction::Internal => "U",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.token() == s)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub t: u64,
    pub port: u8,
    pub direction: Direction,
    pub variant: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

fn single_line(s: &str) -> String {
    let s = s.replace('\n', " | ");
    if s.trim().is_empty() {
        "-".into()
    } else {
        s
    }
}

impl TraceEvent {
    pub fn new(t: u64, port: u8, direction: Direction, variant: &str, summary: &str) -> Self {
        TraceEvent {
            t,
            port,
            direction,
            variant: variant.to_owned(),
            summary: single_line(summary),
        }
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let mut it = line.splitn(5, ' ');
        let mut field = |name: &str| {
            it.next()
                .filter(|s| !s.is_empty())
                .ok_or(format!("missing {name}"))
        };
        let t = field("time")?.parse().map_err(|_| "bad time".to_string())?;
        let port = field("port")?.parse().map_err(|_| "bad port".to_string())?;
        let direction = Direction::from_token(field("direction")?).ok_or("bad direction")?;
        let variant = field("variant")?;
        if !variant.bytes().all(|b| b.is_ascii_alphanumeric()) {
            return Err("bad variant".into());
        }
        let variant = variant.to_owned();
        let summary = field("summary")?.to_owned();
        if summary.contains(['\n', '\r']) {
            return Err("summary spans lines".into());
        }
        Ok(TraceEvent {
            t,
            port,
            direction,
            variant,
            summary,
        })
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.t, self.port, self.direction, self.variant, self.summary
        )
    }
}

pub fn parse_log(text: &str) -> Result<Vec<TraceEvent>, TraceParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            TraceEvent::parse(l).map_err(|message| TraceParseError {
                line: i + 1,
                message,
            })
        })
        .collect()
}

pub fn write_log(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let _ = writeln!(out, "{e}");
    }
    out
}

/// Variants that carry device-originated content when sent to the host.
pub const DEVICE_CONTENT: [&str; 3] = ["HidReport", "Attach", "EnumReply"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("event {index} ({event}) leaks device traffic from a port in state {state}")]
pub struct SafetyViolation {
    pub index: usize,
    pub event: String,
    pub state: String,
}

/// Checks that device content reaches the host only from ports whose last
/// recorded state is `Authorized`.
pub fn check_safety(events: &[TraceEvent]) -> Result<(), SafetyViolation> {
    let mut state: BTreeMap<u8, &str> = BTreeMap::new();
    for (index, e) in events.iter().enumerate() {
        match e.direction {
            Direction::Internal if e.variant == "State" => {
                let s = e.summary.split(' ').next().unwrap_or("");
                state.insert(e.port, s);
            }
            Direction::MediatorToHost if DEVICE_CONTENT.contains(&e.variant.as_str()) => {
                let s = state.get(&e.port).copied().unwrap_or("Empty");
                if s != "Authorized" {
                    return Err(SafetyViolation {
                        index,
                        event: e.to_string(),
                        state: s.to_owned(),
                    });
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Human-readable timeline plus counts.
pub fn render_report(events: &[TraceEvent]) -> String {
    let mut out = String::from("timeline\n");
    for e in events {
        let _ = writeln!(
            out,
            "  t={:<8} port {} {:<3} {:<14} {}",
            e.t, e.port, e.direction, e.variant, e.summary
        );
    }
    let mut by_direction: BTreeMap<Direction, usize> = BTreeMap::new();
    let mut by_variant: BTreeMap<&str, usize> = BTreeMap::new();
    let mut final_state: BTreeMap<u8, &str> = BTreeMap::new();
    let mut anomalies = 0;
    for e in events {
        *by_direction.entry(e.direction).or_default() += 1;
        *by_variant.entry(&e.variant).or_default() += 1;
        if e.direction == Direction::Internal && e.variant == "State" {
            final_state.insert(e.port, &e.summary);
        }
        if e.variant == "Anomaly" {
            anomalies += 1;
        }
    }
    let _ = writeln!(out, "summary\n  events {}", events.len());
    for (d, n) in &by_direction {
        let _ = writeln!(out, "  {:<3} {n}", d.token());
    }
    for (v, n) in &by_variant {
        let _ = writeln!(out, "  {v:<14} {n}");
    }
    let _ = writeln!(out, "  anomalies {anomalies}");
    for (p, s) in &final_state {
        let _ = writeln!(out, "  port {p} final state {s}");
    }
    let verdict = match check_safety(events) {
        Ok(()) => "safety ok".to_string(),
        Err(v) => format!("safety VIOLATED: {v}"),
    };
    let _ = writeln!(out, "  {verdict}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn line_round_trip() {
        let e = TraceEvent::new(12, 0, Direction::MediatorToHost, "HidReport", "payload=00");
        assert_eq!(e.to_string(), "12 0 U>H HidReport payload=00");
        assert_eq!(TraceEvent::parse(&e.to_string()).unwrap(), e);
        let d = TraceEvent::new(1, 0, Direction::Internal, "Display", "a\nb");
        assert_eq!(d.summary, "a | b");
        assert_eq!(
            TraceEvent::new(1, 0, Direction::Internal, "Ack", "").summary,
            "-"
        );
    }

    #[test]
    fn rejects_bad_lines() {
        for bad in [
            "",
            "1 0 U>H",
            "x 0 U Ack -",
            "1 0 <> Ack -",
            "1 300 U Ack -",
            "1 0 U A-b -",
        ] {
            assert!(TraceEvent::parse(bad).is_err(), "{bad:?}");
        }
        let err = parse_log("1 0 U State Empty\nnope\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn monitor_flags_unauthorized_delivery() {
        let ok = parse_log(
            "0 0 U State Authorizing\n1 0 U State Authorized\n2 0 U>H HidReport payload=01\n",
        )
        .unwrap();
        assert!(check_safety(&ok).is_ok());
        let bad = parse_log("0 0 U State Authorizing\n2 0 U>H HidReport payload=01\n").unwrap();
        assert_eq!(check_safety(&bad).unwrap_err().index, 1);
        let replies = parse_log("0 0 U>H BlockReadReply error=unavailable\n").unwrap();
        assert!(check_safety(&replies).is_ok());
    }

    #[test]
    fn report_counts() {
        let ev =
            parse_log("0 0 U State Blocked bad-signature\n1 0 U Anomaly late report\n").unwrap();
        let r = render_report(&ev);
        assert!(r.contains("anomalies 1"));
        assert!(r.contains("port 0 final state Blocked bad-signature"));
        assert!(r.contains("safety ok"));
    }

    proptest! {
        #[test]
        fn parse_never_panics(s in "\\PC{0,80}") {
            if let Ok(e) = TraceEvent::parse(&s) {
                prop_assert_eq!(TraceEvent::parse(&e.to_string()).unwrap(), e);
            }
        }
    }
}
