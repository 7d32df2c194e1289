mod common;

use std::sync::Arc;

use common::{copy, open, small_medium};
use ucap_core::cs::{CsClient, CsServer, CsStore, RootRegistry};
use ucap_core::integrity::BlockReason;
use ucap_core::merkle::Digest;
use ucap_core::provision::{Fixture, CS_TOKEN};

fn persistent_store(fixture: &Fixture, path: &std::path::Path) -> Arc<CsStore> {
    Arc::new(
        CsStore::open(
            path,
            vec![CS_TOKEN.into()],
            fixture.ca.public_key(),
            fixture.revocation_list(),
        )
        .unwrap(),
    )
}

#[test]
fn roots_survive_a_server_restart() {
    let fixture = Fixture::from_seed(30);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("cs.log");
    let root = Digest::from_bytes([7; 32]);

    let server = CsServer::bind("127.0.0.1:0", persistent_store(&fixture, &log))
        .unwrap()
        .spawn()
        .unwrap();
    let client = CsClient::connect(server.addr(), Some(CS_TOKEN)).unwrap();
    assert_eq!(client.put_root("stick", &root).unwrap(), 1);
    assert_eq!(client.put_root("stick", &root).unwrap(), 2);
    server.shutdown();

    let server = CsServer::bind("127.0.0.1:0", persistent_store(&fixture, &log))
        .unwrap()
        .spawn()
        .unwrap();
    let client = CsClient::connect(server.addr(), None).unwrap();
    let rec = client.get_root("stick").unwrap().unwrap();
    assert_eq!((rec.version, rec.root), (2, root));
    assert!(client.get_root("other").unwrap().is_none());
}

#[test]
fn rollback_over_tcp_is_detected() {
    let fixture = Fixture::from_seed(31);
    let server = CsServer::bind("127.0.0.1:0", Arc::new(fixture.cs_store()))
        .unwrap()
        .spawn()
        .unwrap();
    let registry: Arc<dyn RootRegistry> =
        Arc::new(CsClient::new(server.addr(), Some(CS_TOKEN)).unwrap());
    let mut anchor = fixture.anchor();

    let mut s = open(
        small_medium(&fixture, "tcp", 8, 512),
        &mut anchor,
        fixture.mediator.clone(),
        Some(registry.clone()),
    )
    .unwrap();
    s.protected_write(1, &[1; 512]).unwrap();
    let mut image = s.close().unwrap();
    let snapshot = copy(&mut image);

    let mut s = open(
        image,
        &mut anchor,
        fixture.mediator.clone(),
        Some(registry.clone()),
    )
    .unwrap();
    s.protected_write(1, &[2; 512]).unwrap();
    s.close().unwrap();

    let err = open(
        snapshot,
        &mut anchor,
        fixture.mediator.clone(),
        Some(registry),
    )
    .unwrap_err();
    assert_eq!(err.reason, BlockReason::RollbackDetected);
}

#[test]
fn unauthenticated_mediator_cannot_commit() {
    let fixture = Fixture::from_seed(32);
    let server = CsServer::bind("127.0.0.1:0", Arc::new(fixture.cs_store()))
        .unwrap()
        .spawn()
        .unwrap();
    let registry: Arc<dyn RootRegistry> = Arc::new(CsClient::new(server.addr(), None).unwrap());
    let mut s = open(
        small_medium(&fixture, "anon", 8, 512),
        &mut fixture.anchor(),
        fixture.mediator.clone(),
        Some(registry),
    )
    .unwrap();
    s.protected_write(0, &[3; 512]).unwrap();
    assert!(s.flush().is_err());
    assert!(s.is_dirty());
}
