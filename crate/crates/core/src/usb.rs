//! Simulated USB transport: the messages exchanged between devices, the
//! mediator and the host, with a compact binary encoding.
//!
//! ```text
//! tag u8, then by tag (integers little-endian):
//! 1 Attach          descriptor
//! 2 LogicDetach
//! 3 HidReport       len u8 (<= 64) | payload
//! 4 BlockRead       lba u64
//! 5 BlockReadReply  status u8 | (status 0) len u32 | data
//! 6 BlockWrite      lba u64 | len u32 | data
//! 7 WriteReply      status u8
//! 8 EnumRequest
//! 9 EnumReply       descriptor
//! 10 Ack
//!
//! descriptor: class u8 | protocol u8 | vendor u16 | product u16 | serial_len u8 | serial
//! ```

use std::fmt;

use thiserror::Error;

pub const MAX_HID_REPORT: usize = 64;
pub const MAX_BLOCK_PAYLOAD: usize = 4096;
pub const MAX_SERIAL_LEN: usize = 64;

pub const CLASS_HID: u8 = 0x03;
pub const CLASS_PRINTER: u8 = 0x07;
pub const CLASS_MASS_STORAGE: u8 = 0x08;
pub const PROTOCOL_KEYBOARD: u8 = 1;
pub const PROTOCOL_MOUSE: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("message truncated")]
    Truncated,
    #[error("unknown message tag {0}")]
    Tag(u8),
    #[error("unknown status code {0}")]
    Status(u8),
    #[error("{0} exceeds its size limit")]
    TooLong(&'static str),
    #[error("serial is not printable ASCII")]
    Serial,
    #[error("trailing bytes after message")]
    Trailing,
}

/// Device type as derived from the class and protocol it declares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeclaredType {
    Keyboard,
    Mouse,
    MassStorage,
    Other { class: u8, protocol: u8 },
}

impl fmt::Display for DeclaredType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeclaredType::Keyboard => f.write_str("keyboard"),
            DeclaredType::Mouse => f.write_str("mouse"),
            DeclaredType::MassStorage => f.write_str("mass-storage"),
            DeclaredType::Other { class, protocol } => {
                write!(f, "class-{class:02x}.{protocol:02x}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeviceDescriptor {
    pub class: u8,
    pub protocol: u8,
    pub vendor: u16,
    pub product: u16,
    pub serial: String,
}

impl DeviceDescriptor {
    pub fn keyboard(serial: &str) -> Self {
        Self::new(CLASS_HID, PROTOCOL_KEYBOARD, serial)
    }

    pub fn mouse(serial: &str) -> Self {
        Self::new(CLASS_HID, PROTOCOL_MOUSE, serial)
    }

    pub fn mass_storage(serial: &str) -> Self {
        Self::new(CLASS_MASS_STORAGE, 0x50, serial)
    }

    pub fn printer(serial: &str) -> Self {
        Self::new(CLASS_PRINTER, 0x02, serial)
    }

    fn new(class: u8, protocol: u8, serial: &str) -> Self {
        DeviceDescriptor {
            class,
            protocol,
            vendor: 0x1d6b,
            product: 0x0100 + class as u16,
            serial: serial.to_owned(),
        }
    }

    pub fn declared_type(&self) -> DeclaredType {
        match (self.class, self.protocol) {
            (CLASS_HID, PROTOCOL_KEYBOARD) => DeclaredType::Keyboard,
            (CLASS_HID, PROTOCOL_MOUSE) => DeclaredType::Mouse,
            (CLASS_MASS_STORAGE, _) => DeclaredType::MassStorage,
            (class, protocol) => DeclaredType::Other { class, protocol },
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.class);
        out.push(self.protocol);
        out.extend_from_slice(&self.vendor.to_le_bytes());
        out.extend_from_slice(&self.product.to_le_bytes());
        let serial = &self.serial.as_bytes()[..self.serial.len().min(MAX_SERIAL_LEN)];
        out.push(serial.len() as u8);
        out.extend_from_slice(serial);
    }
}

/// Outcome of a block request as reported to the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IoStatus {
    Tamper,
    OutOfRange,
    Inhibited,
    BadLength,
    Io,
    /// No authorized medium on that port.
    Unavailable,
}

impl IoStatus {
    fn code(self) -> u8 {
        match self {
            IoStatus::Tamper => 1,
            IoStatus::OutOfRange => 2,
            IoStatus::Inhibited => 3,
            IoStatus::BadLength => 4,
            IoStatus::Io => 5,
            IoStatus::Unavailable => 6,
        }
    }

    fn from_code(c: u8) -> Result<Self, DecodeError> {
        Ok(match c {
            1 => IoStatus::Tamper,
            2 => IoStatus::OutOfRange,
            3 => IoStatus::Inhibited,
            4 => IoStatus::BadLength,
            5 => IoStatus::Io,
            6 => IoStatus::Unavailable,
            other => return Err(DecodeError::Status(other)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            IoStatus::Tamper => "tamper",
            IoStatus::OutOfRange => "out-of-range",
            IoStatus::Inhibited => "inhibited",
            IoStatus::BadLength => "bad-length",
            IoStatus::Io => "io",
            IoStatus::Unavailable => "unavailable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum UsbMessage {
    Attach(DeviceDescriptor),
    LogicDetach,
    HidReport(Vec<u8>),
    BlockRead { lba: u64 },
    BlockReadReply(Result<Vec<u8>, IoStatus>),
    BlockWrite { lba: u64, data: Vec<u8> },
    WriteReply(Result<(), IoStatus>),
    EnumRequest,
    EnumReply(DeviceDescriptor),
    Ack,
}

impl UsbMessage {
    pub fn variant(&self) -> &'static str {
        match self {
            UsbMessage::Attach(_) => "Attach",
            UsbMessage::LogicDetach => "LogicDetach",
            UsbMessage::HidReport(_) => "HidReport",
            UsbMessage::BlockRead { .. } => "BlockRead",
            UsbMessage::BlockReadReply(_) => "BlockReadReply",
            UsbMessage::BlockWrite { .. } => "BlockWrite",
            UsbMessage::WriteReply(_) => "WriteReply",
            UsbMessage::EnumRequest => "EnumRequest",
            UsbMessage::EnumReply(_) => "EnumReply",
            UsbMessage::Ack => "Ack",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            UsbMessage::Attach(d) => {
                out.push(1);
                d.encode_into(&mut out);
            }
            UsbMessage::LogicDetach => out.push(2),
            UsbMessage::HidReport(p) => {
                out.push(3);
                let p = &p[..p.len().min(MAX_HID_REPORT)];
                out.push(p.len() as u8);
                out.extend_from_slice(p);
            }
            UsbMessage::BlockRead { lba } => {
                out.push(4);
                out.extend_from_slice(&lba.to_le_bytes());
            }
            UsbMessage::BlockReadReply(r) => {
                out.push(5);
                match r {
                    Ok(data) => {
                        out.push(0);
                        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
                        out.extend_from_slice(data);
                    }
                    Err(s) => out.push(s.code()),
                }
            }
            UsbMessage::BlockWrite { lba, data } => {
                out.push(6);
                out.extend_from_slice(&lba.to_le_bytes());
                out.extend_from_slice(&(data.len() as u32).to_le_bytes());
                out.extend_from_slice(data);
            }
            UsbMessage::WriteReply(r) => {
                out.push(7);
                out.push(match r {
                    Ok(()) => 0,
                    Err(s) => s.code(),
                });
            }
            UsbMessage::EnumRequest => out.push(8),
            UsbMessage::EnumReply(d) => {
                out.push(9);
                d.encode_into(&mut out);
            }
            UsbMessage::Ack => out.push(10),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Cursor(bytes);
        let msg = match r.u8()? {
            1 => UsbMessage::Attach(r.descriptor()?),
            2 => UsbMessage::LogicDetach,
            3 => {
                let len = r.u8()? as usize;
                if len > MAX_HID_REPORT {
                    return Err(DecodeError::TooLong("HID report"));
                }
                UsbMessage::HidReport(r.take(len)?.to_vec())
            }
            4 => UsbMessage::BlockRead { lba: r.u64()? },
            5 => match r.u8()? {
                0 => UsbMessage::BlockReadReply(Ok(r.block()?)),
                s => UsbMessage::BlockReadReply(Err(IoStatus::from_code(s)?)),
            },
            6 => {
                let lba = r.u64()?;
                UsbMessage::BlockWrite {
                    lba,
                    data: r.block()?,
                }
            }
            7 => match r.u8()? {
                0 => UsbMessage::WriteReply(Ok(())),
                s => UsbMessage::WriteReply(Err(IoStatus::from_code(s)?)),
            },
            8 => UsbMessage::EnumRequest,
            9 => UsbMessage::EnumReply(r.descriptor()?),
            10 => UsbMessage::Ack,
            t => return Err(DecodeError::Tag(t)),
        };
        if !r.0.is_empty() {
            return Err(DecodeError::Trailing);
        }
        Ok(msg)
    }

    /// One-line rendering used in traces.
    pub fn summary(&self) -> String {
        match self {
            UsbMessage::Attach(d) | UsbMessage::EnumReply(d) => format!(
                "type={} vid={:04x} pid={:04x} serial={}",
                d.declared_type(),
                d.vendor,
                d.product,
                if d.serial.is_empty() { "-" } else { &d.serial }
            ),
            UsbMessage::HidReport(p) => format!(
                "payload={}",
                if p.is_empty() {
                    "-".into()
                } else {
                    hex::encode(p)
                }
            ),
            UsbMessage::BlockRead { lba } => format!("lba={lba}"),
            UsbMessage::BlockReadReply(Ok(d)) => format!("ok len={}", d.len()),
            UsbMessage::BlockReadReply(Err(s)) | UsbMessage::WriteReply(Err(s)) => {
                format!("error={}", s.name())
            }
            UsbMessage::BlockWrite { lba, data } => format!("lba={lba} len={}", data.len()),
            UsbMessage::WriteReply(Ok(())) => "ok".into(),
            UsbMessage::LogicDetach | UsbMessage::EnumRequest | UsbMessage::Ack => "-".into(),
        }
    }
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.0.len() < n {
            return Err(DecodeError::Truncated);
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn block(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.u32()? as usize;
        if len > MAX_BLOCK_PAYLOAD {
            return Err(DecodeError::TooLong("block payload"));
        }
        Ok(self.take(len)?.to_vec())
    }

    fn descriptor(&mut self) -> Result<DeviceDescriptor, DecodeError> {
        let class = self.u8()?;
        let protocol = self.u8()?;
        let vendor = self.u16()?;
        let product = self.u16()?;
        let len = self.u8()? as usize;
        if len > MAX_SERIAL_LEN {
            return Err(DecodeError::TooLong("serial"));
        }
        let raw = self.take(len)?;
        if !raw.iter().all(u8::is_ascii_graphic) {
            return Err(DecodeError::Serial);
        }
        Ok(DeviceDescriptor {
            class,
            protocol,
            vendor,
            product,
            serial: String::from_utf8(raw.to_vec()).expect("ASCII"),
        })
    }
}

/// Boot-protocol keyboard report for one key press, or a release when
/// `symbol` is `None`.
pub fn keyboard_report(symbol: Option<char>) -> Vec<u8> {
    let mut r = vec![0u8; 8];
    if let Some(c) = symbol {
        let c = c.to_ascii_lowercase();
        r[2] = match c {
            'a'..='z' => 0x04 + (c as u8 - b'a'),
            '1'..='9' => 0x1E + (c as u8 - b'1'),
            '0' => 0x27,
            // Enter; never part of a code.
            _ => 0x28,
        };
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyEvent {
    Press(Option<char>),
    Release,
}

/// Decodes a boot-protocol keyboard report. Keys outside `A-Z0-9` decode to
/// `Press(None)`.
pub fn parse_keyboard_report(payload: &[u8]) -> Option<KeyEvent> {
    if payload.len() != 8 {
        return None;
    }
    Some(match payload[2] {
        0 => KeyEvent::Release,
        k @ 0x04..=0x1D => KeyEvent::Press(Some((b'A' + (k - 0x04)) as char)),
        k @ 0x1E..=0x26 => KeyEvent::Press(Some((b'1' + (k - 0x1E)) as char)),
        0x27 => KeyEvent::Press(Some('0')),
        _ => KeyEvent::Press(None),
    })
}

/// Relative mouse report: buttons, dx, dy.
pub fn mouse_report(buttons: u8, dx: i16, dy: i16) -> Vec<u8> {
    let mut r = vec![buttons];
    r.extend_from_slice(&dx.to_le_bytes());
    r.extend_from_slice(&dy.to_le_bytes());
    r
}

pub fn parse_mouse_report(payload: &[u8]) -> Option<(u8, i16, i16)> {
    if payload.len() != 5 {
        return None;
    }
    Some((
        payload[0],
        i16::from_le_bytes([payload[1], payload[2]]),
        i16::from_le_bytes([payload[3], payload[4]]),
    ))
}
