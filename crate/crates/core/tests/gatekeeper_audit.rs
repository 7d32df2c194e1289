mod common;

use common::{open, small_medium};
use ucap_core::gatekeeper::{
    read_volume, AuditDecision, AuditLog, AuditRecord, Gatekeeper, OperatorRegistry, Policy,
    Rejected,
};
use ucap_core::provision::Fixture;

#[test]
fn audit_file_holds_one_parsable_line_per_attempt() {
    let fixture = Fixture::from_seed(40);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.log");
    let mut operators = OperatorRegistry::new();
    operators.register("ops\tteam", "pw");
    let policy = Policy::parse("DENY size > 600\nALLOW name *.cfg").unwrap();
    let mut gk = Gatekeeper::new(operators, policy, AuditLog::with_file(&path).unwrap());
    let mut s = open(
        small_medium(&fixture, "audit", 16, 512),
        &mut fixture.anchor(),
        fixture.mediator.clone(),
        None,
    )
    .unwrap();

    assert!(gk.authenticate("ops\tteam", "nope", 1).is_err());
    let op = gk.authenticate("ops\tteam", "pw", 2).unwrap();
    gk.transfer(&op, "a.cfg", b"key=value", Some(&mut s), 3)
        .unwrap();
    assert!(matches!(
        gk.transfer(&op, "big.cfg", &[0; 700], Some(&mut s), 4),
        Err(Rejected::PolicyDeny(_))
    ));
    assert!(matches!(
        gk.transfer(&op, "b.cfg", b"x", None, 5),
        Err(Rejected::SessionBlocked)
    ));
    assert!(matches!(
        gk.transfer(&op, "a.txt\nforged", b"x", Some(&mut s), 6),
        Err(Rejected::PolicyDeny(_))
    ));

    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    let parsed: Vec<AuditRecord> = lines
        .iter()
        .map(|l| AuditRecord::parse_line(l).unwrap())
        .collect();
    assert_eq!(parsed, gk.audit().records());
    let decisions: Vec<AuditDecision> = parsed.iter().map(|r| r.decision).collect();
    assert_eq!(
        decisions,
        [
            AuditDecision::AuthFailed,
            AuditDecision::Allow,
            AuditDecision::Deny,
            AuditDecision::Deny,
            AuditDecision::Deny
        ]
    );
    assert!(parsed.iter().all(|r| !r.operator_id.contains('\t')));

    let files = read_volume(&mut s).unwrap();
    assert_eq!(files.len(), 1);
    assert_eq!(files[0].bytes, b"key=value");
}

#[test]
fn volume_fills_up_without_corruption() {
    let fixture = Fixture::from_seed(41);
    let mut operators = OperatorRegistry::new();
    operators.register("op", "pw");
    let mut gk = Gatekeeper::new(
        operators,
        Policy::parse("ALLOW name *").unwrap(),
        AuditLog::new(),
    );
    let op = gk.authenticate("op", "pw", 0).unwrap();
    let mut s = open(
        small_medium(&fixture, "full", 8, 512),
        &mut fixture.anchor(),
        fixture.mediator.clone(),
        None,
    )
    .unwrap();
    let mut stored = 0;
    for i in 0..10 {
        match gk.transfer(&op, &format!("f{i}"), &[i as u8; 900], Some(&mut s), i) {
            Ok(_) => stored += 1,
            Err(Rejected::NoSpace(_)) => break,
            Err(e) => panic!("{e}"),
        }
    }
    assert_eq!(stored, 3);
    let files = read_volume(&mut s).unwrap();
    assert_eq!(files.len(), 3);
    for (i, f) in files.iter().enumerate() {
        assert_eq!(f.bytes, vec![i as u8; 900]);
    }
    assert_eq!(gk.audit().records().len(), 4);
}
