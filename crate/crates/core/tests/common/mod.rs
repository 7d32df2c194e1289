#![allow(dead_code)]

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use ucap_core::cs::RootRegistry;
use ucap_core::hid::{AuthStatus, Challenge, MOUSE_PAIRS};
use ucap_core::image::{authorize_rsd, format_memory, FormatOptions, RsdId, RsdImage};
use ucap_core::integrity::{init_session, IntegritySession, SessionRejected, TrustAnchor};
use ucap_core::pki::DeviceIdentity;
use ucap_core::provision::Fixture;
use ucap_core::router::{DownLed, Endpoint, PortState, Router, RouterConfig};
use ucap_core::trace::check_safety;
use ucap_core::usb::{keyboard_report, mouse_report, DeviceDescriptor, IoStatus, UsbMessage};

pub fn small_medium(fixture: &Fixture, id: &str, blocks: u64, block_size: u32) -> RsdImage {
    let mut opts = FormatOptions::new(RsdId::new(id).unwrap(), blocks, block_size);
    opts.allow_small_blocks = true;
    format_memory(&opts, &fixture.formatter).unwrap()
}

pub fn open(
    image: RsdImage,
    anchor: &mut TrustAnchor,
    identity: Arc<DeviceIdentity>,
    registry: Option<Arc<dyn RootRegistry>>,
) -> Result<IntegritySession, Box<SessionRejected>> {
    let mut image = image;
    let layout = match authorize_rsd(&mut image) {
        Ok(l) => l,
        Err(e) => {
            return Err(Box::new(SessionRejected {
                reason: ucap_core::integrity::BlockReason::Unreadable,
                detail: e.to_string(),
                image,
            }))
        }
    };
    init_session(image, layout, anchor, identity, registry).map_err(Box::new)
}

pub fn copy(image: &mut RsdImage) -> RsdImage {
    RsdImage::from_bytes(image.to_bytes().unwrap()).unwrap()
}

/// What the human in front of the mediator types or clicks to finish the
/// captcha on `port`.
pub fn answer_reports(router: &Router, port: u8) -> Vec<Vec<u8>> {
    let Some(auth) = router.authorizator(port) else {
        return vec![];
    };
    if auth.status() != AuthStatus::InProgress {
        return vec![];
    }
    let mut reports = Vec::new();
    match *auth.challenge() {
        Challenge::Keyboard(code) => {
            for &c in &code.symbols()[auth.progress()..] {
                reports.push(keyboard_report(Some(c as char)));
                reports.push(keyboard_report(None));
            }
        }
        Challenge::Mouse(m) => {
            let mut at = router.pointer(port).unwrap();
            for k in auth.progress()..2 * MOUSE_PAIRS {
                let c = m.element(k).center();
                reports.push(mouse_report(0, (c.x - at.x) as i16, (c.y - at.y) as i16));
                reports.push(mouse_report(1, 0, 0));
                reports.push(mouse_report(0, 0, 0));
                at = c;
            }
        }
    }
    reports
}

/// Finishes the captcha on `port` through the device's own reports.
pub fn solve(router: &mut Router, port: u8) {
    for r in answer_reports(router, port) {
        router.on_device_message(port, UsbMessage::HidReport(r));
    }
}

pub struct Media {
    pub valid: Vec<u8>,
    pub tampered: Vec<u8>,
}

impl Media {
    pub fn new(fixture: &Fixture) -> Self {
        let mut valid = small_medium(fixture, "adv", 8, 32);
        let valid_bytes = valid.to_bytes().unwrap();
        let layout = authorize_rsd(&mut valid).unwrap();
        let mut tampered = valid_bytes.clone();
        tampered[layout.signature_offset() as usize + 40] ^= 1;
        Media {
            valid: valid_bytes,
            tampered,
        }
    }
}

#[derive(Debug, Default)]
pub struct TraceStats {
    pub events: usize,
    pub authorizations: usize,
    pub forwarded_reports: usize,
    pub violations: Vec<String>,
}

fn random_descriptor(rng: &mut ChaCha20Rng) -> DeviceDescriptor {
    let mut d = match rng.gen_range(0..5) {
        0 => DeviceDescriptor::keyboard("k"),
        1 => DeviceDescriptor::mouse("m"),
        2 => DeviceDescriptor::mass_storage("s"),
        3 => DeviceDescriptor::printer("p"),
        _ => DeviceDescriptor {
            class: rng.gen(),
            protocol: rng.gen(),
            vendor: rng.gen(),
            product: rng.gen(),
            serial: String::new(),
        },
    };
    d.vendor = rng.gen();
    d.serial = format!("sn{}", rng.gen_range(0..1000));
    d
}

fn random_report(rng: &mut ChaCha20Rng) -> Vec<u8> {
    match rng.gen_range(0..4) {
        0 => keyboard_report(Some(*b"AB7Z09QX".choose(rng).unwrap() as char)),
        1 => keyboard_report(None),
        2 => mouse_report(
            rng.gen_range(0..3),
            rng.gen_range(-300..300),
            rng.gen_range(-300..300),
        ),
        _ => {
            let mut v = vec![0u8; rng.gen_range(0..12)];
            rng.fill_bytes(&mut v);
            v
        }
    }
}

fn random_stray(rng: &mut ChaCha20Rng) -> UsbMessage {
    match rng.gen_range(0..6) {
        0 => UsbMessage::EnumRequest,
        1 => UsbMessage::Ack,
        2 => UsbMessage::EnumReply(random_descriptor(rng)),
        3 => UsbMessage::BlockReadReply(Ok(vec![7; 32])),
        4 => UsbMessage::WriteReply(Err(IoStatus::Io)),
        _ => UsbMessage::BlockWrite {
            lba: rng.gen_range(0..10),
            data: vec![1; 32],
        },
    }
}

fn panel_consistent(router: &Router) -> Result<(), String> {
    let states: Vec<PortState> = (0..router.port_count())
        .map(|p| router.port_state(p))
        .collect();
    let attached: Vec<PortState> = states
        .iter()
        .copied()
        .filter(|s| *s != PortState::Empty)
        .collect();
    let led = router.panel().down_led;
    let all_ok = !attached.is_empty() && attached.iter().all(|s| *s == PortState::Authorized);
    let any_blocked = attached.contains(&PortState::Blocked);
    if (led == DownLed::FixedGreen) != all_ok || (led == DownLed::BlinkRed) != any_blocked {
        return Err(format!("LED {led:?} with port states {states:?}"));
    }
    if attached.is_empty() && led != DownLed::Off {
        return Err(format!("LED {led:?} with nothing attached"));
    }
    Ok(())
}

enum Action {
    Device(UsbMessage),
    Attach(DeviceDescriptor, Option<RsdImage>),
    Detach,
    Eject,
    HostRead(u64),
    HostWrite(u64),
    Tick(u64),
}

/// Drives a two-port mediator with `len` random adversarial events and
/// checks every host delivery against the port's state.
pub fn adversarial_trace(fixture: &Fixture, media: &Media, seed: u64, len: usize) -> TraceStats {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut config = RouterConfig::new(fixture.anchor(), fixture.mediator.clone());
    config.ports = 2;
    config.seed = seed;
    let mut router = Router::new(config);
    let mut stats = TraceStats::default();
    let mut attached: [Option<DeviceDescriptor>; 2] = [None, None];

    let mut queued: Vec<Action> = Vec::new();
    let mut queued_port = 0u8;
    for _ in 0..len {
        let (port, action) = if let Some(a) = queued.pop() {
            (queued_port, a)
        } else {
            let port = rng.gen_range(0..2u8);
            let action = match rng.gen_range(0..100) {
                0..=11 => {
                    let d = random_descriptor(&mut rng);
                    let medium = match rng.gen_range(0..4) {
                        0 | 1 => Some(RsdImage::from_bytes(media.valid.clone()).unwrap()),
                        2 => Some(RsdImage::from_bytes(media.tampered.clone()).unwrap()),
                        _ => None,
                    };
                    Action::Attach(d, medium)
                }
                12..=49 => Action::Device(UsbMessage::HidReport(random_report(&mut rng))),
                50..=56 => Action::Device(random_stray(&mut rng)),
                57..=62 => Action::Detach,
                63..=64 => Action::Eject,
                65..=76 => {
                    // The human answers; the reports go out one event each.
                    queued = answer_reports(&router, port)
                        .into_iter()
                        .rev()
                        .map(|r| Action::Device(UsbMessage::HidReport(r)))
                        .collect();
                    queued_port = port;
                    match queued.pop() {
                        Some(a) => a,
                        None => Action::Tick(0),
                    }
                }
                77..=86 => Action::HostRead(rng.gen_range(0..10)),
                87..=94 => Action::HostWrite(rng.gen_range(0..10)),
                _ => Action::Tick(rng.gen_range(0..700)),
            };
            (port, action)
        };
        let before: Vec<PortState> = (0..2).map(|p| router.port_state(p)).collect();
        let mut sent_report: Option<Vec<u8>> = None;
        match action {
            Action::Attach(d, medium) => {
                if router.attach(port, d.clone(), medium).is_ok() {
                    attached[port as usize] = Some(d);
                }
            }
            Action::Device(msg) => {
                if let UsbMessage::HidReport(r) = &msg {
                    sent_report = Some(r.clone());
                }
                router.on_device_message(port, msg);
            }
            Action::Detach => {
                router.on_logic_detach(port);
            }
            Action::Eject => {
                router.eject(port);
            }
            Action::HostRead(lba) => router.on_host_message(port, UsbMessage::BlockRead { lba }),
            Action::HostWrite(lba) => router.on_host_message(
                port,
                UsbMessage::BlockWrite {
                    lba,
                    data: vec![lba as u8; 32],
                },
            ),
            Action::Tick(dt) => {
                let now = router.now_ms() + dt;
                router.on_tick(now);
            }
        }
        stats.events += 1;
        let after: Vec<PortState> = (0..2).map(|p| router.port_state(p)).collect();
        let out: Vec<_> = router
            .take_outbox()
            .into_iter()
            .filter(|d| d.to == Endpoint::Host)
            .collect();

        let mut forwarded: Vec<Vec<u8>> = Vec::new();
        let mut replay: Vec<UsbMessage> = Vec::new();
        for d in &out {
            let p = d.port as usize;
            match &d.message {
                UsbMessage::HidReport(r) => {
                    if d.port != port {
                        stats
                            .violations
                            .push(format!("report surfaced on port {p}"));
                    }
                    forwarded.push(r.clone());
                }
                m @ (UsbMessage::Attach(_) | UsbMessage::EnumReply(_)) => {
                    if after[p] != PortState::Authorized || before[p] == PortState::Authorized {
                        stats.violations.push(format!(
                            "enumeration replayed on port {p} in {:?} -> {:?}",
                            before[p], after[p]
                        ));
                    }
                    replay.push(m.clone());
                }
                UsbMessage::BlockReadReply(r) if before[p] != PortState::Authorized => {
                    if *r != Err(IoStatus::Unavailable) {
                        stats
                            .violations
                            .push(format!("unauthorized port {p} served a read"));
                    }
                }
                UsbMessage::WriteReply(r) if before[p] != PortState::Authorized => {
                    if *r != Err(IoStatus::Unavailable) {
                        stats
                            .violations
                            .push(format!("unauthorized port {p} served a write"));
                    }
                }
                UsbMessage::LogicDetach if before[p] != PortState::Authorized => {
                    stats
                        .violations
                        .push(format!("detach of unauthorized port {p} shown to host"));
                }
                _ => {}
            }
        }
        // A report reaches the host only if its port was already authorized
        // when it arrived, and then unchanged.
        if !forwarded.is_empty() {
            stats.forwarded_reports += forwarded.len();
            if before[port as usize] != PortState::Authorized
                || sent_report.as_ref().map(std::slice::from_ref) != Some(&forwarded[..])
            {
                stats.violations.push(format!(
                    "port {port} forwarded {} reports in {:?} -> {:?}",
                    forwarded.len(),
                    before[port as usize],
                    after[port as usize]
                ));
            }
        }
        if !replay.is_empty() {
            stats.authorizations += 1;
            let p = out
                .iter()
                .find(|d| matches!(d.message, UsbMessage::Attach(_)))
                .map(|d| d.port);
            let expected = p
                .and_then(|p| attached[p as usize].clone())
                .map(|d| vec![UsbMessage::Attach(d.clone()), UsbMessage::EnumReply(d)])
                .unwrap_or_default();
            let enc = |v: &[UsbMessage]| v.iter().map(UsbMessage::encode).collect::<Vec<_>>();
            if enc(&replay) != enc(&expected) {
                stats
                    .violations
                    .push("replay differs from the captured enumeration".into());
            }
        }
        for (p, s) in after.iter().enumerate() {
            if *s == PortState::Empty {
                attached[p] = None;
            }
        }
        if let Err(e) = panel_consistent(&router) {
            stats.violations.push(e);
        }
        if !stats.violations.is_empty() {
            break;
        }
    }
    if let Err(v) = check_safety(router.trace()) {
        stats.violations.push(format!("trace monitor: {v}"));
    }
    stats
}
