//! One check per parser or decoder. Each must return without panicking on
//! any input; accepted inputs must survive a re-encode.

use std::sync::{Arc, OnceLock};

use ucap_core::cs::protocol::{Request, Response};
use ucap_core::gatekeeper::{decode_volume, AuditRecord, Policy};
use ucap_core::image::{authorize_rsd, AdsHeader, ImageHeader, PartitionTable, RsdImage};
use ucap_core::integrity::init_session;
use ucap_core::pki::{Certificate, RevocationList, RootSignature};
use ucap_core::provision::Fixture;
use ucap_core::scenario::Scenario;
use ucap_core::trace::{parse_log, write_log};
use ucap_core::usb::{parse_keyboard_report, parse_mouse_report, UsbMessage};

pub type Check = fn(&[u8]);

pub const TARGETS: &[(&str, Check)] = &[
    ("image_header", image_header),
    ("partition_table", partition_table),
    ("ads_header", ads_header),
    ("medium", medium),
    ("certificate", certificate),
    ("root_signature", root_signature),
    ("revocation_list", revocation_list),
    ("usb_message", usb_message),
    ("hid_report", hid_report),
    ("cs_request", cs_request),
    ("cs_response", cs_response),
    ("scenario", scenario),
    ("policy", policy),
    ("trace_log", trace_log),
    ("audit_line", audit_line),
    ("packed_volume", packed_volume),
];

fn text(data: &[u8]) -> Option<&str> {
    std::str::from_utf8(data).ok()
}

pub fn image_header(data: &[u8]) {
    if let Ok(h) = ImageHeader::decode(data) {
        assert_eq!(h.encode()[..], data[..64]);
    }
}

pub fn partition_table(data: &[u8]) {
    if data.len() < 12 {
        return;
    }
    let block_size = u32::from_le_bytes(data[..4].try_into().unwrap());
    let total = u64::from_le_bytes(data[4..12].try_into().unwrap());
    if let Ok(t) = PartitionTable::decode(&data[12..], block_size, total) {
        assert_eq!(
            PartitionTable::decode(&t.encode(), block_size, total),
            Ok(t)
        );
    }
}

pub fn ads_header(data: &[u8]) {
    if let Ok(h) = AdsHeader::decode(data) {
        assert_eq!(AdsHeader::decode(&h.encode()), Ok(h));
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| Fixture::from_seed(0))
}

/// A whole medium through authorization, verification and reads.
pub fn medium(data: &[u8]) {
    if data.len() > 1 << 16 {
        return;
    }
    let Ok(mut image) = RsdImage::from_bytes(data.to_vec()) else {
        return;
    };
    let Ok(layout) = authorize_rsd(&mut image) else {
        return;
    };
    let f = fixture();
    let Ok(mut s) = init_session(
        image,
        layout,
        &mut f.anchor(),
        Arc::clone(&f.mediator),
        None,
    ) else {
        return;
    };
    for lba in 0..s.host_blocks().min(64) {
        let _ = s.protected_read(lba);
    }
}

pub fn certificate(data: &[u8]) {
    if let Ok(c) = Certificate::decode(data) {
        assert_eq!(c.encode(), data);
    }
    let _ = Certificate::from_slot(data);
}

pub fn root_signature(data: &[u8]) {
    if let Ok(s) = RootSignature::decode(data) {
        assert_eq!(s.encode(), data);
    }
    let _ = RootSignature::from_slot(data);
}

pub fn revocation_list(data: &[u8]) {
    if let Ok(l) = RevocationList::decode(data) {
        assert_eq!(
            RevocationList::decode(&l.encode()).map(|x| x.encode()),
            Ok(l.encode())
        );
    }
}

pub fn usb_message(data: &[u8]) {
    if let Ok(m) = UsbMessage::decode(data) {
        assert_eq!(m.encode(), data);
        let _ = m.summary();
    }
}

pub fn hid_report(data: &[u8]) {
    let _ = parse_keyboard_report(data);
    let _ = parse_mouse_report(data);
}

pub fn cs_request(data: &[u8]) {
    let Some(line) = text(data) else { return };
    if let Ok(r) = Request::parse(line) {
        assert_eq!(Request::parse(&r.to_string()), Ok(r));
    }
}

pub fn cs_response(data: &[u8]) {
    let Some(line) = text(data) else { return };
    if let Ok(r) = Response::parse(line) {
        assert_eq!(Response::parse(&r.to_string()), Ok(r));
    }
}

pub fn scenario(data: &[u8]) {
    if let Some(t) = text(data) {
        let _ = Scenario::parse(t);
    }
}

pub fn policy(data: &[u8]) {
    let Some(t) = text(data) else { return };
    if let Ok(p) = Policy::parse(t) {
        let again = Policy::parse(&p.to_string()).expect("printed policy parses");
        assert_eq!(again.to_string(), p.to_string());
    }
}

pub fn trace_log(data: &[u8]) {
    let Some(t) = text(data) else { return };
    if let Ok(events) = parse_log(t) {
        assert_eq!(parse_log(&write_log(&events)).ok(), Some(events));
    }
}

pub fn audit_line(data: &[u8]) {
    let Some(t) = text(data) else { return };
    if let Ok(r) = AuditRecord::parse_line(t) {
        assert_eq!(AuditRecord::parse_line(&r.to_line()), Ok(r));
    }
}

pub fn packed_volume(data: &[u8]) {
    for b in [32, 512] {
        let _ = decode_volume(data, b);
    }
}
