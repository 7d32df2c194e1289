//! Coordination service: a registry of the current root of every medium,
//! used to detect rollback of a whole medium to an older signed state, and
//! the distribution point for revocation lists.

mod client;
pub mod protocol;
mod server;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::merkle::Digest;
use crate::pki::{CaPublicKey, PkiError, RevocationList, RevocationState};

pub use client::CsClient;
pub use protocol::{valid_key, Request, Response, MAX_LINE_LEN};
pub use server::{CsServer, ServerHandle};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CsError {
    #[error("coordination service unreachable: {0}")]
    Unreachable(String),
    #[error("caller is not authenticated")]
    Unauthenticated,
    #[error("invalid medium id {0:?}")]
    BadKey(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("state log: {0}")]
    Log(String),
    #[error(transparent)]
    Revocation(#[from] PkiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RootRecord {
    pub root: Digest,
    pub version: u64,
}

/// What a mediating device needs from the coordination service.
pub trait RootRegistry: Send + Sync {
    fn get_root(&self, rsd_id: &str) -> Result<Option<RootRecord>, CsError>;
    fn put_root(&self, rsd_id: &str, root: &Digest) -> Result<u64, CsError>;
    fn fetch_revocation_list(&self) -> Result<RevocationList, CsError>;
}

/// Capability proving a caller presented a valid token.
#[derive(Debug, Clone)]
pub struct Writer(());

#[derive(Debug)]
struct State {
    roots: HashMap<String, RootRecord>,
    crl: RevocationList,
    log: Option<File>,
}

/// The registry itself. Updates to all keys are serialized by one lock, which
/// also orders appends to the state log.
#[derive(Debug)]
pub struct CsStore {
    state: Mutex<State>,
    tokens: Vec<String>,
    ca: CaPublicKey,
}

impl CsStore {
    pub fn in_memory(
        tokens: Vec<String>,
        ca: CaPublicKey,
        crl: RevocationList,
    ) -> Result<Self, CsError> {
        if !crl.verify(&ca) {
            return Err(PkiError::BadRevocationSignature.into());
        }
        Ok(CsStore {
            state: Mutex::new(State {
                roots: HashMap::new(),
                crl,
                log: None,
            }),
            tokens,
            ca,
        })
    }

    /// Opens (or creates) an append-only state log and replays it. Lines:
    /// `PUT <id> <hex-root> <version>` and `CRL <hex-encoding>`.
    pub fn open(
        path: impl AsRef<Path>,
        tokens: Vec<String>,
        ca: CaPublicKey,
        crl: RevocationList,
    ) -> Result<Self, CsError> {
        let store = Self::in_memory(tokens, ca, crl)?;
        let log_err = |e: io::Error| CsError::Log(e.to_string());
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(log_err)?;
        {
            let mut st = store.state.lock().expect("poisoned");
            for (n, line) in BufReader::new(&mut file).lines().enumerate() {
                let line = line.map_err(log_err)?;
                replay_line(&mut st, &store.ca, &line)
                    .map_err(|m| CsError::Log(format!("line {}: {m}", n + 1)))?;
            }
            st.log = Some(file);
        }
        Ok(store)
    }

    pub fn authenticate(&self, token: &str) -> Option<Writer> {
        self.tokens.iter().any(|t| t == token).then_some(Writer(()))
    }

    pub fn get_root(&self, rsd_id: &str) -> Option<RootRecord> {
        self.state
            .lock()
            .expect("poisoned")
            .roots
            .get(rsd_id)
            .copied()
    }

    pub fn put_root(&self, _writer: &Writer, rsd_id: &str, root: &Digest) -> Result<u64, CsError> {
        if !valid_key(rsd_id) {
            return Err(CsError::BadKey(rsd_id.to_owned()));
        }
        let mut st = self.state.lock().expect("poisoned");
        let version = st.roots.get(rsd_id).map_or(1, |r| r.version + 1);
        if let Some(log) = &mut st.log {
            writeln!(log, "PUT {rsd_id} {} {version}", root.to_hex())
                .and_then(|_| log.flush())
                .map_err(|e| CsError::Log(e.to_string()))?;
        }
        st.roots.insert(
            rsd_id.to_owned(),
            RootRecord {
                root: *root,
                version,
            },
        );
        Ok(version)
    }

    pub fn revocation_list(&self) -> RevocationList {
        self.state.lock().expect("poisoned").crl.clone()
    }

    /// Replaces the distributed list with a newer CA-signed one.
    pub fn publish_revocation_list(&self, list: RevocationList) -> Result<(), CsError> {
        let mut st = self.state.lock().expect("poisoned");
        let mut check = RevocationState::default();
        check.accept(st.crl.clone(), &self.ca)?;
        check.accept(list.clone(), &self.ca)?;
        if let Some(log) = &mut st.log {
            writeln!(log, "CRL {}", hex::encode(list.encode()))
                .and_then(|_| log.flush())
                .map_err(|e| CsError::Log(e.to_string()))?;
        }
        st.crl = list;
        Ok(())
    }
}

fn replay_line(st: &mut State, ca: &CaPublicKey, line: &str) -> Result<(), String> {
    let parts: Vec<&str> = line.split(' ').collect();
    match parts.as_slice() {
        [] | [""] => Ok(()),
        ["PUT", id, root, version] => {
            let root = Digest::from_hex(root).ok_or("bad root")?;
            let version: u64 = version.parse().map_err(|_| "bad version")?;
            let expected = st.roots.get(*id).map_or(1, |r| r.version + 1);
            if !valid_key(id) || version != expected {
                return Err(format!("unexpected record for {id}"));
            }
            st.roots
                .insert((*id).to_owned(), RootRecord { root, version });
            Ok(())
        }
        ["CRL", enc] => {
            let bytes = hex::decode(enc).map_err(|_| "bad hex")?;
            let list = RevocationList::decode(&bytes).map_err(|e| e.to_string())?;
            if !list.verify(ca) || list.version() <= st.crl.version() {
                return Err("revocation list rejected".into());
            }
            st.crl = list;
            Ok(())
        }
        _ => Err("unrecognized record".into()),
    }
}

/// In-process registry client, with a switch to simulate outages.
#[derive(Debug, Clone)]
pub struct LocalRegistry {
    store: Arc<CsStore>,
    writer: Option<Writer>,
    online: Arc<AtomicBool>,
}

impl LocalRegistry {
    pub fn new(store: Arc<CsStore>, token: Option<&str>) -> Self {
        let writer = token.and_then(|t| store.authenticate(t));
        LocalRegistry {
            store,
            writer,
            online: Arc::new(AtomicBool::new(true)),
        }
    }

    pub fn set_online(&self, online: bool) {
        self.online.store(online, Ordering::SeqCst);
    }

    pub fn store(&self) -> &Arc<CsStore> {
        &self.store
    }

    fn reachable(&self) -> Result<(), CsError> {
        if self.online.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(CsError::Unreachable("simulated outage".into()))
        }
    }
}

impl RootRegistry for LocalRegistry {
    fn get_root(&self, rsd_id: &str) -> Result<Option<RootRecord>, CsError> {
        self.reachable()?;
        Ok(self.store.get_root(rsd_id))
    }

    fn put_root(&self, rsd_id: &str, root: &Digest) -> Result<u64, CsError> {
        self.reachable()?;
        let writer = self.writer.as_ref().ok_or(CsError::Unauthenticated)?;
        self.store.put_root(writer, rsd_id, root)
    }

    fn fetch_revocation_list(&self) -> Result<RevocationList, CsError> {
        self.reachable()?;
        Ok(self.store.revocation_list())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pki::CertificateAuthority;

    fn setup() -> (CertificateAuthority, CsStore) {
        let ca = CertificateAuthority::from_seed([5; 32]);
        let store = CsStore::in_memory(
            vec!["tok".into()],
            ca.public_key(),
            ca.revocation_list(0, []),
        )
        .unwrap();
        (ca, store)
    }

    #[test]
    fn versions_start_at_one_and_increase() {
        let (_, store) = setup();
        let w = store.authenticate("tok").unwrap();
        assert_eq!(store.get_root("m"), None);
        let r1 = Digest::from_bytes([1; 32]);
        let r2 = Digest::from_bytes([2; 32]);
        assert_eq!(store.put_root(&w, "m", &r1).unwrap(), 1);
        assert_eq!(store.put_root(&w, "m", &r2).unwrap(), 2);
        assert_eq!(
            store.get_root("m"),
            Some(RootRecord {
                root: r2,
                version: 2
            })
        );
    }

    #[test]
    fn unauthenticated_put_rejected() {
        let (_, store) = setup();
        assert!(store.authenticate("nope").is_none());
        let reg = LocalRegistry::new(Arc::new(store), Some("nope"));
        assert_eq!(
            reg.put_root("m", &Digest::ZERO),
            Err(CsError::Unauthenticated)
        );
        assert_eq!(reg.get_root("m").unwrap(), None);
    }

    #[test]
    fn outage_makes_every_call_fail() {
        let (_, store) = setup();
        let reg = LocalRegistry::new(Arc::new(store), Some("tok"));
        reg.set_online(false);
        assert!(matches!(reg.get_root("m"), Err(CsError::Unreachable(_))));
        assert!(matches!(
            reg.put_root("m", &Digest::ZERO),
            Err(CsError::Unreachable(_))
        ));
        assert!(reg.fetch_revocation_list().is_err());
    }

    #[test]
    fn revocation_publication_is_monotone() {
        let (ca, store) = setup();
        store
            .publish_revocation_list(ca.revocation_list(2, [7]))
            .unwrap();
        assert!(store
            .publish_revocation_list(ca.revocation_list(2, [8]))
            .is_err());
        let other = CertificateAuthority::from_seed([6; 32]);
        assert!(store
            .publish_revocation_list(other.revocation_list(9, []))
            .is_err());
        assert!(store.revocation_list().contains(7));
    }

    #[test]
    fn log_replays_after_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cs.log");
        let ca = CertificateAuthority::from_seed([5; 32]);
        let open = || {
            CsStore::open(
                &path,
                vec!["tok".into()],
                ca.public_key(),
                ca.revocation_list(0, []),
            )
            .unwrap()
        };
        {
            let s = open();
            let w = s.authenticate("tok").unwrap();
            s.put_root(&w, "a", &Digest::from_bytes([1; 32])).unwrap();
            s.put_root(&w, "a", &Digest::from_bytes([2; 32])).unwrap();
            s.put_root(&w, "b", &Digest::from_bytes([3; 32])).unwrap();
            s.publish_revocation_list(ca.revocation_list(1, [4]))
                .unwrap();
        }
        let s = open();
        assert_eq!(s.get_root("a").unwrap().version, 2);
        assert_eq!(s.get_root("a").unwrap().root, Digest::from_bytes([2; 32]));
        assert_eq!(s.get_root("b").unwrap().version, 1);
        assert_eq!(s.revocation_list().version(), 1);
        let w = s.authenticate("tok").unwrap();
        assert_eq!(s.put_root(&w, "a", &Digest::ZERO).unwrap(), 3);
    }

    #[test]
    fn corrupt_log_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cs.log");
        std::fs::write(&path, "PUT a 00 1\n").unwrap();
        let ca = CertificateAuthority::from_seed([5; 32]);
        let r = CsStore::open(&path, vec![], ca.public_key(), ca.revocation_list(0, []));
        assert!(matches!(r, Err(CsError::Log(_))));
        std::fs::write(&path, format!("PUT a {} 2\n", Digest::ZERO.to_hex())).unwrap();
        let r = CsStore::open(&path, vec![], ca.public_key(), ca.revocation_list(0, []));
        assert!(matches!(r, Err(CsError::Log(_))));
    }
}
