mod common;

use common::{adversarial_trace, solve, Media};
use ucap_core::provision::Fixture;
use ucap_core::router::{DownLed, Endpoint, PortState, Router, RouterConfig};
use ucap_core::trace::{check_safety, parse_log, write_log};
use ucap_core::usb::{keyboard_report, DeviceDescriptor, UsbMessage};

fn router(fixture: &Fixture) -> Router {
    Router::new(RouterConfig::new(
        fixture.anchor(),
        fixture.mediator.clone(),
    ))
}

#[test]
fn random_adversarial_traces_are_safe() {
    let fixture = Fixture::from_seed(1);
    let media = Media::new(&fixture);
    let mut authorizations = 0;
    let mut forwarded = 0;
    for seed in 0..300 {
        let stats = adversarial_trace(&fixture, &media, seed, 100);
        assert!(
            stats.violations.is_empty(),
            "seed {seed}: {:?}",
            stats.violations
        );
        authorizations += stats.authorizations;
        forwarded += stats.forwarded_reports;
    }
    // The generator must actually reach the interesting states.
    assert!(authorizations > 100, "{authorizations}");
    assert!(forwarded > 100, "{forwarded}");
}

#[test]
fn enumeration_is_replayed_only_after_authorization() {
    let fixture = Fixture::from_seed(2);
    let mut r = router(&fixture);
    let d = DeviceDescriptor::keyboard("KB-1");
    r.attach(0, d.clone(), None).unwrap();
    let before: Vec<_> = r.take_outbox();
    assert!(before.iter().all(|x| x.to == Endpoint::Device));
    assert_eq!(
        r.transcript(0),
        &[
            UsbMessage::Attach(d.clone()),
            UsbMessage::EnumReply(d.clone())
        ]
    );
    solve(&mut r, 0);
    let host: Vec<_> = r
        .take_outbox()
        .into_iter()
        .filter(|x| x.to == Endpoint::Host)
        .map(|x| x.message.encode())
        .collect();
    // The final key release is forwarded after the replay.
    assert_eq!(host.len(), 3);
    assert_eq!(host[0], UsbMessage::Attach(d.clone()).encode());
    assert_eq!(host[1], UsbMessage::EnumReply(d).encode());
    assert_eq!(
        host[2],
        UsbMessage::HidReport(keyboard_report(None)).encode()
    );
}

#[test]
fn authorized_reports_pass_unchanged() {
    let fixture = Fixture::from_seed(3);
    let mut r = router(&fixture);
    r.attach(0, DeviceDescriptor::mouse("M"), None).unwrap();
    solve(&mut r, 0);
    assert_eq!(r.port_state(0), PortState::Authorized);
    r.take_outbox();
    let stream: Vec<Vec<u8>> = (0..50u8)
        .map(|i| vec![i, i.wrapping_mul(7), 3, 4, 5])
        .collect();
    for s in &stream {
        r.on_device_message(0, UsbMessage::HidReport(s.clone()));
    }
    let host: Vec<Vec<u8>> = r
        .take_outbox()
        .into_iter()
        .filter(|x| x.to == Endpoint::Host)
        .map(|x| match x.message {
            UsbMessage::HidReport(p) => p,
            other => panic!("{other:?}"),
        })
        .collect();
    assert_eq!(host, stream);
}

#[test]
fn storage_device_sending_hid_traffic_is_contained() {
    let fixture = Fixture::from_seed(4);
    let mut r = router(&fixture);
    let medium = common::small_medium(&fixture, "stick", 8, 512);
    r.attach(0, DeviceDescriptor::mass_storage("stick"), Some(medium))
        .unwrap();
    assert_eq!(r.port_state(0), PortState::Authorized);
    r.take_outbox();
    r.on_device_message(0, UsbMessage::HidReport(keyboard_report(Some('R'))));
    assert!(r.take_outbox().is_empty());
    assert_eq!(r.port_state(0), PortState::Authorized);
    assert!(r.trace().iter().any(|e| e.variant == "Anomaly"));
}

#[test]
fn panel_follows_port_states() {
    let fixture = Fixture::from_seed(5);
    let mut cfg = RouterConfig::new(fixture.anchor(), fixture.mediator.clone());
    cfg.ports = 2;
    let mut r = Router::new(cfg);
    assert_eq!(r.panel().down_led, DownLed::Off);
    r.attach(0, DeviceDescriptor::keyboard("a"), None).unwrap();
    assert_eq!(r.panel().down_led, DownLed::BlinkGreen);
    solve(&mut r, 0);
    assert_eq!(r.panel().down_led, DownLed::FixedGreen);
    r.attach(1, DeviceDescriptor::printer("p"), None).unwrap();
    assert_eq!(r.panel().down_led, DownLed::BlinkRed);
    r.on_logic_detach(1);
    assert_eq!(r.panel().down_led, DownLed::FixedGreen);
    r.on_logic_detach(0);
    assert_eq!(r.panel().down_led, DownLed::Off);
    assert_eq!(r.panel().display_text, "Attach a device.");
}

#[test]
fn trace_log_round_trips_and_passes_monitor() {
    let fixture = Fixture::from_seed(6);
    let mut r = router(&fixture);
    r.attach(0, DeviceDescriptor::keyboard("a"), None).unwrap();
    r.on_device_message(0, UsbMessage::HidReport(keyboard_report(Some('Q'))));
    solve(&mut r, 0);
    r.on_device_message(0, UsbMessage::HidReport(keyboard_report(Some('Q'))));
    let text = write_log(r.trace());
    let parsed = parse_log(&text).unwrap();
    assert_eq!(parsed, r.trace());
    check_safety(&parsed).unwrap();
}
