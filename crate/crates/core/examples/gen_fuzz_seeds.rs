//! Writes well-formed inputs for every fuzz target into `fuzz/corpus`.
//!
//! cargo run -p ucap-core --example gen_fuzz_seeds [-- <corpus dir>]

use std::fs;
use std::path::{Path, PathBuf};

use ucap_core::cs::protocol::{Request, Response};
use ucap_core::cs::RootRecord;
use ucap_core::gatekeeper::{AuditLog, Gatekeeper, OperatorRegistry, Policy};
use ucap_core::image::{
    authorize_rsd, format_memory, FormatOptions, RsdId, RsdImage, ADS_HEADER_LEN,
};
use ucap_core::integrity::init_session;
use ucap_core::merkle::Digest;
use ucap_core::pki::{Certificate, RootSignature};
use ucap_core::provision::Fixture;
use ucap_core::scenario::{run, Scenario};
use ucap_core::trace::write_log;
use ucap_core::usb::{keyboard_report, mouse_report, DeviceDescriptor, IoStatus, UsbMessage};

fn medium(fixture: &Fixture, blocks: u64, block_size: u32) -> RsdImage {
    let mut opts = FormatOptions::new(RsdId::new("seed").unwrap(), blocks, block_size);
    opts.allow_small_blocks = true;
    format_memory(&opts, &fixture.formatter).unwrap()
}

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus"));
    let mut seeds: Vec<(&str, Vec<u8>)> = Vec::new();
    let fixture = Fixture::from_seed(0);

    let mut fresh = medium(&fixture, 8, 32);
    let fresh_bytes = fresh.to_bytes().unwrap();
    let layout = authorize_rsd(&mut fresh).unwrap();
    let mut s = init_session(
        fresh,
        layout,
        &mut fixture.anchor(),
        fixture.mediator.clone(),
        None,
    )
    .unwrap();
    s.protected_write(2, &[0x42; 32]).unwrap();
    let mut written = s.close().unwrap();
    let written_bytes = written.to_bytes().unwrap();
    let layout = authorize_rsd(&mut written).unwrap();

    seeds.push(("image_header", fresh_bytes[..64].to_vec()));
    let mut table = 32u32.to_le_bytes().to_vec();
    table.extend_from_slice(&written.total_blocks().to_le_bytes());
    table.extend_from_slice(&fresh_bytes[64..128]);
    seeds.push(("partition_table", table));
    let ads = (layout.nodes_offset() as usize) - ADS_HEADER_LEN;
    seeds.push((
        "ads_header",
        written_bytes[ads..ads + ADS_HEADER_LEN].to_vec(),
    ));
    seeds.push(("medium", fresh_bytes.clone()));
    seeds.push(("medium", written_bytes.clone()));

    let sig_slot = written_bytes
        [layout.signature_offset() as usize..layout.certificate_offset() as usize]
        .to_vec();
    let cert_slot = written_bytes[layout.certificate_offset() as usize..][..256].to_vec();
    seeds.push((
        "root_signature",
        RootSignature::from_slot(&sig_slot).unwrap().encode(),
    ));
    seeds.push(("root_signature", sig_slot));
    seeds.push((
        "certificate",
        Certificate::from_slot(&cert_slot).unwrap().encode(),
    ));
    seeds.push(("certificate", fixture.formatter.certificate().encode()));
    seeds.push(("certificate", cert_slot));

    let mut f2 = Fixture::from_seed(0);
    seeds.push(("revocation_list", f2.revocation_list().encode()));
    seeds.push(("revocation_list", f2.revoke(7).encode()));

    let messages = [
        UsbMessage::Attach(DeviceDescriptor::keyboard("kb-1")),
        UsbMessage::EnumRequest,
        UsbMessage::EnumReply(DeviceDescriptor::mass_storage("stick")),
        UsbMessage::HidReport(keyboard_report(Some('Q'))),
        UsbMessage::BlockRead { lba: 3 },
        UsbMessage::BlockReadReply(Ok(vec![1; 32])),
        UsbMessage::BlockWrite {
            lba: 1,
            data: vec![9; 32],
        },
        UsbMessage::WriteReply(Err(IoStatus::Tamper)),
        UsbMessage::LogicDetach,
        UsbMessage::Ack,
    ];
    for m in &messages {
        seeds.push(("usb_message", m.encode()));
    }
    seeds.push(("hid_report", keyboard_report(Some('7'))));
    seeds.push(("hid_report", keyboard_report(None)));
    seeds.push(("hid_report", mouse_report(1, -40, 12)));

    let root = Digest::from_bytes([0xab; 32]);
    for r in [
        Request::Auth("mediator-token".into()),
        Request::Put {
            rsd_id: "seed".into(),
            root,
        },
        Request::Get {
            rsd_id: "seed".into(),
        },
        Request::Crl,
    ] {
        seeds.push(("cs_request", r.to_string().into_bytes()));
    }
    for r in [
        Response::Ok,
        Response::Version(4),
        Response::Root(RootRecord { root, version: 2 }),
        Response::Unknown,
        Response::Crl(120),
    ] {
        seeds.push(("cs_response", r.to_string().into_bytes()));
    }

    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut names: Vec<_> = fs::read_dir(&scenarios)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    for p in names
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "scn"))
    {
        seeds.push(("scenario", fs::read(p).unwrap()));
    }
    let badusb = Scenario::load(scenarios.join("badusb_keyboard.scn")).unwrap();
    seeds.push(("trace_log", write_log(&run(&badusb).trace).into_bytes()));

    let policy_text = "# firmware\nALLOW hash ab00000000000000000000000000000000000000000000000000000000000000\nDENY size > 1048576\nALLOW name *.pdf\n";
    seeds.push(("policy", policy_text.as_bytes().to_vec()));

    let mut operators = OperatorRegistry::new();
    operators.register("alice", "pw");
    let mut gk = Gatekeeper::new(
        operators,
        Policy::parse("ALLOW name *.txt").unwrap(),
        AuditLog::new(),
    );
    let op = gk.authenticate("alice", "pw", 0).unwrap();
    let mut target = medium(&fixture, 16, 512);
    let layout = authorize_rsd(&mut target).unwrap();
    let mut s = init_session(
        target,
        layout,
        &mut fixture.anchor(),
        fixture.mediator.clone(),
        None,
    )
    .unwrap();
    gk.transfer(&op, "notes.txt", b"meeting at noon", Some(&mut s), 5)
        .unwrap();
    gk.transfer(&op, "tool.exe", b"MZ", Some(&mut s), 6)
        .unwrap_err();
    let _ = gk.authenticate("mallory", "guess", 7);
    for r in gk.audit().records() {
        seeds.push(("audit_line", r.to_line().into_bytes()));
    }
    let mut volume = Vec::new();
    for lba in 0..4 {
        volume.extend(s.protected_read(lba).unwrap());
    }
    seeds.push(("packed_volume", volume));

    let mut counts = std::collections::BTreeMap::<&str, usize>::new();
    for (target, bytes) in seeds {
        let dir = out.join(target);
        fs::create_dir_all(&dir).unwrap();
        let n = counts.entry(target).or_default();
        fs::write(dir.join(format!("seed-{n}")), bytes).unwrap();
        *n += 1;
    }
    for (t, n) in counts {
        println!("{t}: {n}");
    }
}
