//! The mediator's event loop.
//!
//! Every device plugged into a down port is enumerated by the mediator
//! first, and the transcript is kept. Keyboards and mice must then pass a
//! captcha; storage media must pass the storage authorizator and the
//! integrity chain. Only then does the mediator replay the transcript to the
//! host. From that point HID reports pass through unchanged and host block
//! requests go to the integrity session. Everything a device sends before
//! that, or after it is blocked, stays inside the mediator.

use std::fmt;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::cs::RootRegistry;
use crate::hid::{
    AuthStatus, Feedback, HidAuthorizator, HidKind, Point, DISPLAY_HEIGHT, DISPLAY_WIDTH,
};
use crate::image::{authorize_rsd, RsdImage};
use crate::integrity::{
    init_session, AccessError, CrashPoint, IntegritySession, TrustAnchor, DEFAULT_FLUSH_INTERVAL_MS,
};
use crate::pki::DeviceIdentity;
use crate::trace::{Direction, TraceEvent};
use crate::usb::{
    parse_keyboard_report, parse_mouse_report, DeclaredType, DeviceDescriptor, IoStatus, KeyEvent,
    UsbMessage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PortState {
    Empty,
    Enumerating,
    Authorizing,
    Authorized,
    Blocked,
}

impl fmt::Display for PortState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PortState::Empty => "Empty",
            PortState::Enumerating => "Enumerating",
            PortState::Authorizing => "Authorizing",
            PortState::Authorized => "Authorized",
            PortState::Blocked => "Blocked",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpLed {
    OrangeOn,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownLed {
    Off,
    BlinkGreen,
    FixedGreen,
    BlinkRed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelState {
    pub up_led: UpLed,
    pub down_led: DownLed,
    pub display_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Host,
    Device,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub to: Endpoint,
    pub port: u8,
    pub message: UsbMessage,
}

pub struct RouterConfig {
    pub ports: u8,
    pub seed: u64,
    pub anchor: TrustAnchor,
    pub identity: Arc<DeviceIdentity>,
    pub registry: Option<Arc<dyn RootRegistry>>,
    pub flush_interval_ms: u64,
}

impl RouterConfig {
    pub fn new(anchor: TrustAnchor, identity: Arc<DeviceIdentity>) -> Self {
        RouterConfig {
            ports: 1,
            seed: 0,
            anchor,
            identity,
            registry: None,
            flush_interval_ms: DEFAULT_FLUSH_INTERVAL_MS,
        }
    }
}

struct Pointer {
    at: Point,
    buttons: u8,
}

enum Role {
    None,
    Hid {
        auth: HidAuthorizator,
        pointer: Pointer,
    },
    Storage {
        session: Option<IntegritySession>,
        medium: Option<RsdImage>,
    },
}

struct Port {
    state: PortState,
    descriptor: Option<DeviceDescriptor>,
    transcript: Vec<UsbMessage>,
    role: Role,
    reason: Option<String>,
}

impl Port {
    fn empty() -> Self {
        Port {
            state: PortState::Empty,
            descriptor: None,
            transcript: Vec::new(),
            role: Role::None,
            reason: None,
        }
    }
}

/// A mediator with its down ports, panel and event trace.
pub struct Router {
    ports: Vec<Port>,
    rng: ChaCha20Rng,
    anchor: TrustAnchor,
    identity: Arc<DeviceIdentity>,
    registry: Option<Arc<dyn RootRegistry>>,
    flush_interval_ms: u64,
    now_ms: u64,
    display: String,
    trace: Vec<TraceEvent>,
    outbox: Vec<Delivery>,
}

impl fmt::Debug for Router {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Router")
            .field(
                "ports",
                &self.ports.iter().map(|p| p.state).collect::<Vec<_>>(),
            )
            .field("now_ms", &self.now_ms)
            .field("events", &self.trace.len())
            .finish()
    }
}

const IDLE_TEXT: &str = "Attach a device.";

fn access_status(e: &AccessError) -> IoStatus {
    match e {
        AccessError::TamperDetected(_) => IoStatus::Tamper,
        AccessError::OutOfRange { .. } => IoStatus::OutOfRange,
        AccessError::Inhibited(_) => IoStatus::Inhibited,
        AccessError::WrongBlockSize { .. } => IoStatus::BadLength,
        AccessError::Io(_) => IoStatus::Io,
    }
}

impl Router {
    pub fn new(config: RouterConfig) -> Self {
        Router {
            ports: (0..config.ports.max(1)).map(|_| Port::empty()).collect(),
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            anchor: config.anchor,
            identity: config.identity,
            registry: config.registry,
            flush_interval_ms: config.flush_interval_ms,
            now_ms: 0,
            display: IDLE_TEXT.into(),
            trace: Vec::new(),
            outbox: Vec::new(),
        }
    }

    pub fn port_count(&self) -> u8 {
        self.ports.len() as u8
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn port_state(&self, port: u8) -> PortState {
        self.ports
            .get(port as usize)
            .map_or(PortState::Empty, |p| p.state)
    }

    /// Why the port is blocked, if it is.
    pub fn block_reason(&self, port: u8) -> Option<&str> {
        self.ports.get(port as usize)?.reason.as_deref()
    }

    pub fn descriptor(&self, port: u8) -> Option<&DeviceDescriptor> {
        self.ports.get(port as usize)?.descriptor.as_ref()
    }

    /// Messages the device sent while being enumerated.
    pub fn transcript(&self, port: u8) -> &[UsbMessage] {
        self.ports.get(port as usize).map_or(&[], |p| &p.transcript)
    }

    pub fn authorizator(&self, port: u8) -> Option<&HidAuthorizator> {
        match &self.ports.get(port as usize)?.role {
            Role::Hid { auth, .. } => Some(auth),
            _ => None,
        }
    }

    pub fn pointer(&self, port: u8) -> Option<Point> {
        match &self.ports.get(port as usize)?.role {
            Role::Hid { pointer, .. } => Some(pointer.at),
            _ => None,
        }
    }

    pub fn session(&self, port: u8) -> Option<&IntegritySession> {
        match &self.ports.get(port as usize)?.role {
            Role::Storage { session, .. } => session.as_ref(),
            _ => None,
        }
    }

    /// The integrity session of an authorized medium, for in-mediator
    /// services such as the gatekeeper.
    pub fn session_mut(&mut self, port: u8) -> Option<&mut IntegritySession> {
        match &mut self.ports.get_mut(port as usize)?.role {
            Role::Storage { session, .. } => session.as_mut(),
            _ => None,
        }
    }

    pub fn anchor_mut(&mut self) -> &mut TrustAnchor {
        &mut self.anchor
    }

    pub fn panel(&self) -> PanelState {
        let states = self.ports.iter().map(|p| p.state);
        let down_led = if states.clone().any(|s| s == PortState::Blocked) {
            DownLed::BlinkRed
        } else if states
            .clone()
            .any(|s| matches!(s, PortState::Enumerating | PortState::Authorizing))
        {
            DownLed::BlinkGreen
        } else if states.clone().any(|s| s == PortState::Authorized) {
            DownLed::FixedGreen
        } else {
            DownLed::Off
        };
        PanelState {
            up_led: UpLed::OrangeOn,
            down_led,
            display_text: self.display.clone(),
        }
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_outbox(&mut self) -> Vec<Delivery> {
        std::mem::take(&mut self.outbox)
    }

    fn log(&mut self, port: u8, direction: Direction, variant: &str, summary: &str) {
        self.trace.push(TraceEvent::new(
            self.now_ms,
            port,
            direction,
            variant,
            summary,
        ));
    }

    fn log_message(&mut self, port: u8, direction: Direction, msg: &UsbMessage) {
        let summary = msg.summary();
        self.log(port, direction, msg.variant(), &summary);
    }

    fn send(&mut self, to: Endpoint, port: u8, message: UsbMessage) {
        let dir = match to {
            Endpoint::Host => Direction::MediatorToHost,
            Endpoint::Device => Direction::MediatorToDevice,
        };
        self.log_message(port, dir, &message);
        self.outbox.push(Delivery { to, port, message });
    }

    fn anomaly(&mut self, port: u8, what: &str) {
        self.log(port, Direction::Internal, "Anomaly", what);
    }

    fn set_display(&mut self, port: u8, text: String) {
        if self.display != text {
            self.log(port, Direction::Internal, "Display", &text);
            self.display = text;
        }
    }

    fn set_state(&mut self, port: u8, state: PortState, reason: Option<String>) {
        let p = &mut self.ports[port as usize];
        p.state = state;
        p.reason = reason.clone();
        let summary = match reason {
            Some(r) => format!("{state} {r}"),
            None => state.to_string(),
        };
        self.log(port, Direction::Internal, "State", &summary);
    }

    fn valid_port(&mut self, port: u8) -> bool {
        if (port as usize) < self.ports.len() {
            true
        } else {
            self.anomaly(port, "no such port");
            false
        }
    }

    /// A device is plugged into `port`. `medium` is the storage behind a
    /// mass-storage device. If the port is occupied the medium is handed
    /// back.
    pub fn attach(
        &mut self,
        port: u8,
        descriptor: DeviceDescriptor,
        medium: Option<RsdImage>,
    ) -> Result<(), Option<RsdImage>> {
        if !self.valid_port(port) {
            return Err(medium);
        }
        self.log_message(
            port,
            Direction::DeviceToMediator,
            &UsbMessage::Attach(descriptor.clone()),
        );
        if self.ports[port as usize].state != PortState::Empty {
            self.anomaly(port, "attach on an occupied port");
            return Err(medium);
        }
        self.set_state(port, PortState::Enumerating, None);
        self.send(Endpoint::Device, port, UsbMessage::EnumRequest);
        let reply = UsbMessage::EnumReply(descriptor.clone());
        self.log_message(port, Direction::DeviceToMediator, &reply);
        {
            let p = &mut self.ports[port as usize];
            p.descriptor = Some(descriptor.clone());
            p.transcript = vec![UsbMessage::Attach(descriptor.clone()), reply];
        }
        self.set_state(port, PortState::Authorizing, None);

        match descriptor.declared_type() {
            DeclaredType::Keyboard | DeclaredType::Mouse => {
                let kind = if descriptor.declared_type() == DeclaredType::Keyboard {
                    HidKind::Keyboard
                } else {
                    HidKind::Mouse
                };
                let auth = HidAuthorizator::new(kind, self.rng.next_u64());
                let text = auth.display().to_owned();
                self.ports[port as usize].role = Role::Hid {
                    auth,
                    pointer: Pointer {
                        at: Point {
                            x: DISPLAY_WIDTH / 2,
                            y: DISPLAY_HEIGHT / 2,
                        },
                        buttons: 0,
                    },
                };
                self.set_display(port, text);
            }
            DeclaredType::MassStorage => self.authorize_storage(port, medium),
            other => {
                self.ports[port as usize].role = Role::Storage {
                    session: None,
                    medium,
                };
                self.set_display(port, format!("Device type {other} is not allowed."));
                self.set_state(port, PortState::Blocked, Some("unsupported-type".into()));
            }
        }
        Ok(())
    }

    fn authorize_storage(&mut self, port: u8, medium: Option<RsdImage>) {
        let Some(mut image) = medium else {
            self.ports[port as usize].role = Role::Storage {
                session: None,
                medium: None,
            };
            self.set_display(port, "Storage device refused: no medium.".into());
            self.set_state(port, PortState::Blocked, Some("no-medium".into()));
            return;
        };
        let layout = match authorize_rsd(&mut image) {
            Ok(l) => l,
            Err(e) => {
                self.ports[port as usize].role = Role::Storage {
                    session: None,
                    medium: Some(image),
                };
                self.set_display(port, format!("Storage device not authorized: {e}"));
                self.set_state(port, PortState::Blocked, Some(e.token().into()));
                return;
            }
        };
        let opened = init_session(
            image,
            layout,
            &mut self.anchor,
            self.identity.clone(),
            self.registry.clone(),
        );
        match opened {
            Ok(mut session) => {
                session.set_flush_interval(self.flush_interval_ms);
                session.tick(self.now_ms);
                self.ports[port as usize].role = Role::Storage {
                    session: Some(session),
                    medium: None,
                };
                self.set_display(port, "Storage device authorized.".into());
                self.authorize(port);
            }
            Err(rej) => {
                let token = rej.reason.token();
                self.ports[port as usize].role = Role::Storage {
                    session: None,
                    medium: Some(rej.image),
                };
                self.log(port, Direction::Internal, "Refused", &rej.detail);
                self.set_display(port, format!("Storage device blocked: {token}"));
                self.set_state(port, PortState::Blocked, Some(token.into()));
            }
        }
    }

    /// Marks the port authorized and replays the enumeration to the host.
    fn authorize(&mut self, port: u8) {
        self.set_state(port, PortState::Authorized, None);
        let transcript = self.ports[port as usize].transcript.clone();
        let mut it = transcript.into_iter();
        if let Some(first) = it.next() {
            self.send(Endpoint::Host, port, first);
        }
        for m in it {
            self.log_message(port, Direction::HostToMediator, &UsbMessage::EnumRequest);
            self.send(Endpoint::Host, port, m);
        }
    }

    /// A message from the device on `port`.
    pub fn on_device_message(&mut self, port: u8, msg: UsbMessage) {
        if !self.valid_port(port) {
            return;
        }
        match msg {
            UsbMessage::Attach(d) => {
                let _ = self.attach(port, d, None);
            }
            UsbMessage::LogicDetach => {
                self.log_message(port, Direction::DeviceToMediator, &msg);
                let _ = self.detach_inner(port, None);
            }
            UsbMessage::HidReport(payload) => self.on_hid_report(port, payload),
            other => {
                self.log_message(port, Direction::DeviceToMediator, &other);
                self.anomaly(port, &format!("unexpected {} from device", other.variant()));
            }
        }
    }

    fn on_hid_report(&mut self, port: u8, payload: Vec<u8>) {
        let msg = UsbMessage::HidReport(payload);
        self.log_message(port, Direction::DeviceToMediator, &msg);
        let UsbMessage::HidReport(payload) = msg else {
            unreachable!()
        };
        let state = self.ports[port as usize].state;
        if state == PortState::Empty {
            self.anomaly(port, "report on an empty port");
            return;
        }
        if !matches!(self.ports[port as usize].role, Role::Hid { .. }) {
            self.anomaly(port, "HID report from a non-HID device, dropped");
            return;
        }
        self.send(Endpoint::Device, port, UsbMessage::Ack);
        match state {
            PortState::Authorized => {
                self.send(Endpoint::Host, port, UsbMessage::HidReport(payload))
            }
            PortState::Authorizing => self.feed_authorizator(port, &payload),
            _ => {}
        }
    }

    fn feed_authorizator(&mut self, port: u8, payload: &[u8]) {
        let Role::Hid { auth, pointer } = &mut self.ports[port as usize].role else {
            return;
        };
        let feedback = match auth.kind() {
            HidKind::Keyboard => match parse_keyboard_report(payload) {
                Some(KeyEvent::Release) => None,
                Some(KeyEvent::Press(c)) => Some(auth.submit_key(c.unwrap_or('?'))),
                None => Some(auth.submit_key('?')),
            },
            HidKind::Mouse => parse_mouse_report(payload).and_then(|(buttons, dx, dy)| {
                pointer.at.x = (pointer.at.x + dx as i32).clamp(0, DISPLAY_WIDTH - 1);
                pointer.at.y = (pointer.at.y + dy as i32).clamp(0, DISPLAY_HEIGHT - 1);
                let pressed = buttons & 1 == 1 && pointer.buttons & 1 == 0;
                pointer.buttons = buttons;
                pressed.then(|| auth.submit_click(pointer.at))
            }),
        };
        let Some(feedback) = feedback else { return };
        let (status, text, kind) = (auth.status(), auth.display().to_owned(), auth.kind());
        self.log(
            port,
            Direction::Internal,
            "Feedback",
            &format!("{feedback:?}"),
        );
        self.set_display(port, text);
        match (feedback, status) {
            (Feedback::Authorized, AuthStatus::Authorized) => self.authorize(port),
            (Feedback::Blocked, AuthStatus::Blocked) => {
                self.set_state(port, PortState::Blocked, Some(format!("{kind}-captcha")))
            }
            _ => {}
        }
    }

    /// The device on `port` disappears, logically or physically. Nothing more
    /// is written to its medium, which is handed back.
    pub fn on_logic_detach(&mut self, port: u8) -> Option<RsdImage> {
        if !self.valid_port(port) {
            return None;
        }
        self.log_message(port, Direction::DeviceToMediator, &UsbMessage::LogicDetach);
        self.detach_inner(port, None)
    }

    /// Power is lost on `port` in the middle of a flush, at `point`. The
    /// medium is handed back as the interrupted flush left it.
    pub fn crash(&mut self, port: u8, point: CrashPoint) -> Option<RsdImage> {
        if !self.valid_port(port) {
            return None;
        }
        self.anomaly(port, &format!("power lost during flush, {}", point.token()));
        self.detach_inner(port, Some(point))
    }

    fn detach_inner(&mut self, port: u8, crash: Option<CrashPoint>) -> Option<RsdImage> {
        let p = std::mem::replace(&mut self.ports[port as usize], Port::empty());
        if p.state == PortState::Empty {
            self.anomaly(port, "detach on an empty port");
            return None;
        }
        let was_authorized = p.state == PortState::Authorized;
        let medium = match p.role {
            Role::Storage { session, medium } => {
                if session.as_ref().is_some_and(|s| s.is_dirty()) {
                    self.anomaly(port, "medium removed with unflushed changes");
                }
                session
                    .map(|s| match crash {
                        Some(point) => s.crash(point),
                        None => s.into_image(),
                    })
                    .or(medium)
            }
            _ => None,
        };
        if was_authorized {
            self.send(Endpoint::Host, port, UsbMessage::LogicDetach);
        }
        self.set_state(port, PortState::Empty, None);
        if self.ports.iter().all(|p| p.state == PortState::Empty) {
            self.set_display(port, IDLE_TEXT.into());
        }
        medium
    }

    /// Flushes the medium on `port`, then detaches it.
    pub fn eject(&mut self, port: u8) -> Option<RsdImage> {
        self.flush(port);
        self.on_logic_detach(port)
    }

    /// Flushes the integrity session on `port`, if any. Returns whether the
    /// session is clean afterwards.
    pub fn flush(&mut self, port: u8) -> bool {
        let Some(session) = self.session_mut(port) else {
            return true;
        };
        let was_dirty = session.is_dirty();
        let result = session.flush();
        match result {
            Ok(()) => {
                if was_dirty {
                    self.log(port, Direction::Internal, "Flush", "ok");
                }
                true
            }
            Err(e) => {
                self.log(port, Direction::Internal, "Flush", &format!("failed {e}"));
                false
            }
        }
    }

    /// A request from the host for the device on `port`.
    pub fn on_host_message(&mut self, port: u8, msg: UsbMessage) {
        if !self.valid_port(port) {
            return;
        }
        self.log_message(port, Direction::HostToMediator, &msg);
        let authorized = self.port_state(port) == PortState::Authorized;
        match msg {
            UsbMessage::BlockRead { lba } => {
                let reply = match self.session_mut(port).filter(|_| authorized) {
                    None => Err(IoStatus::Unavailable),
                    Some(s) => s.protected_read(lba).map_err(|e| access_status(&e)),
                };
                if let Err(IoStatus::Tamper) = reply {
                    self.set_display(port, format!("TAMPER DETECTED on block {lba}."));
                }
                self.send(Endpoint::Host, port, UsbMessage::BlockReadReply(reply));
            }
            UsbMessage::BlockWrite { lba, data } => {
                let reply = match self.session_mut(port).filter(|_| authorized) {
                    None => Err(IoStatus::Unavailable),
                    Some(s) => s.protected_write(lba, &data).map_err(|e| access_status(&e)),
                };
                if let Err(IoStatus::Tamper) = reply {
                    self.set_display(port, format!("TAMPER DETECTED on block {lba}."));
                }
                self.send(Endpoint::Host, port, UsbMessage::WriteReply(reply));
            }
            other => self.anomaly(port, &format!("unexpected {} from host", other.variant())),
        }
    }

    /// Advances simulated time and fires due flush timers.
    pub fn on_tick(&mut self, now_ms: u64) {
        self.now_ms = self.now_ms.max(now_ms);
        for port in 0..self.ports.len() as u8 {
            let now = self.now_ms;
            let Some(session) = self.session_mut(port) else {
                continue;
            };
            match session.tick(now) {
                Some(Ok(())) => self.log(port, Direction::Internal, "Flush", "ok"),
                Some(Err(e)) => {
                    self.log(port, Direction::Internal, "Flush", &format!("failed {e}"))
                }
                None => {}
            }
        }
    }
}
