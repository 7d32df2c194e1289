//! Mediated block I/O on an authorized medium.
//!
//! Opening a session walks the verification chain: the last-writer
//! certificate against the CA and the revocation list, the root signature
//! against that certificate, the stored tree against the signed root and,
//! when a coordination service is configured, the signed root against the
//! registered one. Reads are checked against the trusted root; writes update
//! the in-memory tree and the on-disk tree, signature and certificate are
//! persisted later by [`IntegritySession::flush`].

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::cs::{CsError, RootRegistry};
use crate::image::{empty_root, AdsLayout, RsdImage};
use crate::merkle::{self, Digest, MerkleAds, NodeAccess, DIGEST_LEN};
use crate::pki::{
    verify_certificate, verify_root_signature, CaPublicKey, Certificate, DeviceIdentity, PkiError,
    RevocationList, RevocationState, Role, RootSignature, CERTIFICATE_SLOT_LEN,
    ROOT_SIGNATURE_SLOT_LEN,
};

pub const DEFAULT_FLUSH_INTERVAL_MS: u64 = 500;

/// The CA key and the newest revocation list a mediating device has seen.
#[derive(Debug, Clone)]
pub struct TrustAnchor {
    ca: CaPublicKey,
    revocations: RevocationState,
}

impl TrustAnchor {
    pub fn new(ca: CaPublicKey, revocations: RevocationList) -> Result<Self, PkiError> {
        let mut state = RevocationState::default();
        state.accept(revocations, &ca)?;
        Ok(TrustAnchor {
            ca,
            revocations: state,
        })
    }

    pub fn ca(&self) -> &CaPublicKey {
        &self.ca
    }

    pub fn revocation_list(&self) -> &RevocationList {
        self.revocations.current().expect("set at construction")
    }

    /// Installs `list` if it is CA-signed and newer than the current one.
    pub fn accept(&mut self, list: RevocationList) -> Result<(), PkiError> {
        self.revocations.accept(list, &self.ca)
    }

    /// Pulls the registry's list. Same-version lists are ignored; older or
    /// forged ones are errors.
    pub fn refresh(&mut self, registry: &dyn RootRegistry) -> Result<bool, CsError> {
        let list = registry.fetch_revocation_list()?;
        if list.version() == self.revocation_list().version() && list.verify(&self.ca) {
            return Ok(false);
        }
        self.accept(list)?;
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockReason {
    BadCertificate,
    BadSignature,
    AdsInconsistent,
    RollbackDetected,
    CsUnreachable,
    Unreadable,
}

impl BlockReason {
    pub const ALL: [BlockReason; 6] = [
        BlockReason::BadCertificate,
        BlockReason::BadSignature,
        BlockReason::AdsInconsistent,
        BlockReason::RollbackDetected,
        BlockReason::CsUnreachable,
        BlockReason::Unreadable,
    ];

    pub fn token(self) -> &'static str {
        match self {
            BlockReason::BadCertificate => "bad-certificate",
            BlockReason::BadSignature => "bad-signature",
            BlockReason::AdsInconsistent => "ads-inconsistent",
            BlockReason::RollbackDetected => "rollback-detected",
            BlockReason::CsUnreachable => "cs-unreachable",
            BlockReason::Unreadable => "unreadable",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.token() == s)
    }
}

impl fmt::Display for BlockReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// A medium that failed the verification chain. The image is handed back so
/// callers can inspect or detach it.
#[derive(Debug)]
pub struct SessionRejected {
    pub reason: BlockReason,
    pub detail: String,
    pub image: RsdImage,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error("TAMPER DETECTED at block {0}")]
    TamperDetected(u64),
    #[error("block {lba} is past the last host block {visible}")]
    OutOfRange { lba: u64, visible: u64 },
    #[error("block {0} is outside the secure partition")]
    Inhibited(u64),
    #[error("expected {expected} bytes, got {actual}")]
    WrongBlockSize { expected: usize, actual: usize },
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlushError {
    #[error("coordination service: {0}")]
    Cs(CsError),
    #[error("i/o: {0}")]
    Io(String),
}

/// Where [`IntegritySession::crash`] stops a pending flush.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Data blocks written, nothing of the flush.
    AfterData,
    /// Tree nodes written, signature and certificate not.
    AfterNodes,
    /// Nodes and signature written, certificate and registry not.
    AfterSignature,
}

impl CrashPoint {
    pub const ALL: [CrashPoint; 3] = [
        CrashPoint::AfterData,
        CrashPoint::AfterNodes,
        CrashPoint::AfterSignature,
    ];

    pub fn token(self) -> &'static str {
        match self {
            CrashPoint::AfterData => "after-data",
            CrashPoint::AfterNodes => "after-nodes",
            CrashPoint::AfterSignature => "after-signature",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.token() == s)
    }
}

pub struct IntegritySession {
    image: RsdImage,
    layout: AdsLayout,
    ads: MerkleAds,
    trusted_root: Digest,
    dirty_nodes: BTreeSet<usize>,
    identity: Arc<DeviceIdentity>,
    registry: Option<Arc<dyn RootRegistry>>,
    certificate_written: bool,
    flush_interval_ms: u64,
    now_ms: u64,
    flush_due_ms: Option<u64>,
}

impl fmt::Debug for IntegritySession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntegritySession")
            .field("rsd_id", self.layout.rsd_id())
            .field("trusted_root", &self.trusted_root)
            .field("dirty", &self.is_dirty())
            .field("mediator", &self.identity.device_id())
            .field("registry", &self.registry.is_some())
            .finish()
    }
}

fn read_region(image: &mut RsdImage, offset: u64, len: usize) -> Result<Vec<u8>, String> {
    let mut buf = vec![0u8; len];
    image.read_at(offset, &mut buf).map_err(|e| e.to_string())?;
    Ok(buf)
}

struct Verified {
    ads: MerkleAds,
    root: Digest,
    certificate: Certificate,
}

fn verify_chain(
    image: &mut RsdImage,
    layout: &AdsLayout,
    anchor: &TrustAnchor,
    registry: Option<&dyn RootRegistry>,
) -> Result<Verified, (BlockReason, String)> {
    let unreadable = |e: String| (BlockReason::Unreadable, e);

    let slot = read_region(image, layout.certificate_offset(), CERTIFICATE_SLOT_LEN)
        .map_err(unreadable)?;
    let certificate =
        Certificate::from_slot(&slot).map_err(|e| (BlockReason::BadCertificate, e.to_string()))?;
    if !verify_certificate(&certificate, anchor.ca(), Some(anchor.revocation_list())) {
        return Err((
            BlockReason::BadCertificate,
            format!("certificate serial {} rejected", certificate.serial()),
        ));
    }

    let slot = read_region(image, layout.signature_offset(), ROOT_SIGNATURE_SLOT_LEN)
        .map_err(unreadable)?;
    let signature =
        RootSignature::from_slot(&slot).map_err(|e| (BlockReason::BadSignature, e.to_string()))?;
    if !verify_root_signature(&certificate, &layout.signing_context(), &signature) {
        return Err((
            BlockReason::BadSignature,
            "root signature does not verify under the last-writer certificate".into(),
        ));
    }
    let root = signature.root();
    if certificate.role() == Role::Formatter
        && root != empty_root(layout.leaves(), layout.block_size())
    {
        return Err((
            BlockReason::BadSignature,
            "formatter signature over a non-empty root".into(),
        ));
    }

    let raw = read_region(image, layout.nodes_offset(), layout.nodes_len() as usize)
        .map_err(unreadable)?;
    let nodes = raw
        .chunks_exact(DIGEST_LEN)
        .map(|c| Digest::from_slice(c).expect("exact chunks"))
        .collect();
    let ads = MerkleAds::from_nodes(layout.leaves(), layout.block_size() as usize, nodes)
        .map_err(|e| (BlockReason::AdsInconsistent, e.to_string()))?;
    if let Some(v) = ads.first_inconsistent_node() {
        return Err((
            BlockReason::AdsInconsistent,
            format!("node {v} disagrees with its children"),
        ));
    }
    if ads.root() != root {
        return Err((
            BlockReason::AdsInconsistent,
            "stored tree root differs from signed root".into(),
        ));
    }

    if let Some(registry) = registry {
        match registry.get_root(layout.rsd_id().as_str()) {
            Err(e) => return Err((BlockReason::CsUnreachable, e.to_string())),
            Ok(Some(rec)) if rec.root != root => {
                return Err((
                    BlockReason::RollbackDetected,
                    format!(
                        "registry holds version {} with a different root",
                        rec.version
                    ),
                ))
            }
            Ok(_) => {}
        }
    }
    Ok(Verified {
        ads,
        root,
        certificate,
    })
}

/// Opens a session on an authorized medium. With a registry, the revocation
/// list is refreshed from it first.
pub fn init_session(
    mut image: RsdImage,
    layout: AdsLayout,
    anchor: &mut TrustAnchor,
    identity: Arc<DeviceIdentity>,
    registry: Option<Arc<dyn RootRegistry>>,
) -> Result<IntegritySession, SessionRejected> {
    if let Some(reg) = &registry {
        if let Err(e) = anchor.refresh(reg.as_ref()) {
            let reason = match e {
                CsError::Unreachable(_) => BlockReason::CsUnreachable,
                _ => BlockReason::BadCertificate,
            };
            return Err(SessionRejected {
                reason,
                detail: format!("revocation list refresh failed: {e}"),
                image,
            });
        }
    }
    match verify_chain(&mut image, &layout, anchor, registry.as_deref()) {
        Err((reason, detail)) => Err(SessionRejected {
            reason,
            detail,
            image,
        }),
        Ok(v) => Ok(IntegritySession {
            certificate_written: v.certificate == *identity.certificate(),
            image,
            layout,
            ads: v.ads,
            trusted_root: v.root,
            dirty_nodes: BTreeSet::new(),
            identity,
            registry,
            flush_interval_ms: DEFAULT_FLUSH_INTERVAL_MS,
            now_ms: 0,
            flush_due_ms: None,
        }),
    }
}

impl IntegritySession {
    pub fn layout(&self) -> &AdsLayout {
        &self.layout
    }

    pub fn trusted_root(&self) -> Digest {
        self.trusted_root
    }

    pub fn is_dirty(&self) -> bool {
        !self.dirty_nodes.is_empty()
    }

    pub fn host_blocks(&self) -> u64 {
        self.layout.visible()
    }

    pub fn block_size(&self) -> usize {
        self.layout.block_size() as usize
    }

    pub fn node_access(&self) -> NodeAccess {
        self.ads.node_access()
    }

    pub fn reset_node_access(&self) {
        self.ads.reset_node_access()
    }

    pub fn set_flush_interval(&mut self, ms: u64) {
        self.flush_interval_ms = ms;
    }

    /// Direct access to the medium, bypassing all checks. Models a party with
    /// physical access, not a host.
    pub fn medium_mut(&mut self) -> &mut RsdImage {
        &mut self.image
    }

    fn check_lba(&self, lba: u64) -> Result<(), AccessError> {
        if lba >= self.layout.leaves() {
            return Err(AccessError::Inhibited(lba));
        }
        if lba >= self.layout.visible() {
            return Err(AccessError::OutOfRange {
                lba,
                visible: self.layout.visible(),
            });
        }
        Ok(())
    }

    fn read_checked(&mut self, lba: u64) -> Result<(Vec<u8>, merkle::IntegrityProof), AccessError> {
        self.check_lba(lba)?;
        let data = self
            .image
            .raw_read(self.layout.physical_block(lba))
            .map_err(|e| AccessError::Io(e.to_string()))?;
        let proof = self.ads.prove(lba).expect("index checked");
        if !merkle::verify(&self.trusted_root, lba, &data, &proof) {
            return Err(AccessError::TamperDetected(lba));
        }
        Ok((data, proof))
    }

    pub fn protected_read(&mut self, lba: u64) -> Result<Vec<u8>, AccessError> {
        self.read_checked(lba).map(|(data, _)| data)
    }

    /// Writes a block after checking the block being replaced.
    pub fn protected_write(&mut self, lba: u64, data: &[u8]) -> Result<(), AccessError> {
        let b = self.block_size();
        if data.len() != b {
            return Err(AccessError::WrongBlockSize {
                expected: b,
                actual: data.len(),
            });
        }
        let (_, proof) = self.read_checked(lba)?;
        self.image
            .raw_write(self.layout.physical_block(lba), data)
            .map_err(|e| AccessError::Io(e.to_string()))?;
        self.trusted_root = self
            .ads
            .update_with_proof(&proof, data)
            .expect("shape checked");
        self.dirty_nodes.extend(self.ads.path(lba));
        if self.flush_due_ms.is_none() {
            self.flush_due_ms = Some(self.now_ms + self.flush_interval_ms);
        }
        Ok(())
    }

    /// Advances simulated time; flushes once the timer started by the first
    /// unflushed write expires.
    pub fn tick(&mut self, now_ms: u64) -> Option<Result<(), FlushError>> {
        self.now_ms = self.now_ms.max(now_ms);
        match self.flush_due_ms {
            Some(due) if due <= self.now_ms => Some(self.flush()),
            _ => None,
        }
    }

    fn write_nodes(&mut self) -> Result<(), FlushError> {
        let base = self.layout.nodes_offset();
        let nodes = self.ads.nodes();
        for &v in &self.dirty_nodes {
            self.image
                .write_at(base + (v * DIGEST_LEN) as u64, nodes[v].as_bytes())
                .map_err(|e| FlushError::Io(e.to_string()))?;
        }
        Ok(())
    }

    fn write_signature(&mut self) -> Result<(), FlushError> {
        let sig = self
            .identity
            .sign_root(&self.layout.signing_context(), self.trusted_root);
        let slot = sig.to_slot().map_err(|e| FlushError::Io(e.to_string()))?;
        self.image
            .write_at(self.layout.signature_offset(), &slot)
            .map_err(|e| FlushError::Io(e.to_string()))
    }

    fn write_certificate(&mut self) -> Result<(), FlushError> {
        if self.certificate_written {
            return Ok(());
        }
        let slot = self
            .identity
            .certificate()
            .to_slot()
            .map_err(|e| FlushError::Io(e.to_string()))?;
        self.image
            .write_at(self.layout.certificate_offset(), &slot)
            .map_err(|e| FlushError::Io(e.to_string()))?;
        self.certificate_written = true;
        Ok(())
    }

    /// Persists the tree, the signature, the certificate if this session has
    /// not written it yet, and registers the root. On a registry failure the
    /// session stays dirty.
    pub fn flush(&mut self) -> Result<(), FlushError> {
        if !self.is_dirty() {
            self.flush_due_ms = None;
            return Ok(());
        }
        self.write_nodes()?;
        self.write_signature()?;
        self.write_certificate()?;
        self.image
            .sync()
            .map_err(|e| FlushError::Io(e.to_string()))?;
        if let Some(reg) = &self.registry {
            reg.put_root(self.layout.rsd_id().as_str(), &self.trusted_root)
                .map_err(FlushError::Cs)?;
        }
        self.dirty_nodes.clear();
        self.flush_due_ms = None;
        Ok(())
    }

    /// Simulates power loss part-way through a flush.
    pub fn crash(mut self, point: CrashPoint) -> RsdImage {
        if self.is_dirty() {
            if point != CrashPoint::AfterData {
                let _ = self.write_nodes();
            }
            if point == CrashPoint::AfterSignature {
                let _ = self.write_signature();
            }
        }
        self.image
    }

    /// Flushes and returns the medium. On failure the medium comes back with
    /// whatever the flush managed to write.
    pub fn close(mut self) -> Result<RsdImage, (FlushError, RsdImage)> {
        match self.flush() {
            Ok(()) => Ok(self.image),
            Err(e) => Err((e, self.image)),
        }
    }

    /// Returns the medium without flushing.
    pub fn into_image(self) -> RsdImage {
        self.image
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cs::{CsStore, LocalRegistry};
    use crate::image::{authorize_rsd, format_memory, FormatOptions, RsdId};
    use crate::pki::CertificateAuthority;

    struct Fixture {
        ca: CertificateAuthority,
        formatter: DeviceIdentity,
        mediator: Arc<DeviceIdentity>,
    }

    fn fixture() -> Fixture {
        let mut ca = CertificateAuthority::from_seed([1; 32]);
        let formatter =
            DeviceIdentity::provision(&mut ca, "formatter", Role::Formatter, [2; 32]).unwrap();
        let mediator =
            Arc::new(DeviceIdentity::provision(&mut ca, "u-1", Role::Device, [3; 32]).unwrap());
        Fixture {
            ca,
            formatter,
            mediator,
        }
    }

    impl Fixture {
        fn anchor(&self) -> TrustAnchor {
            TrustAnchor::new(self.ca.public_key(), self.ca.revocation_list(0, [])).unwrap()
        }

        fn image(&self, blocks: u64, b: u32) -> RsdImage {
            let mut opts = FormatOptions::new(RsdId::new("disk").unwrap(), blocks, b);
            opts.allow_small_blocks = true;
            format_memory(&opts, &self.formatter).unwrap()
        }

        fn open(
            &self,
            mut image: RsdImage,
            registry: Option<Arc<dyn RootRegistry>>,
        ) -> Result<IntegritySession, SessionRejected> {
            let layout = authorize_rsd(&mut image).unwrap();
            init_session(
                image,
                layout,
                &mut self.anchor(),
                self.mediator.clone(),
                registry,
            )
        }
    }

    #[test]
    fn fresh_image_reads_zero() {
        let fx = fixture();
        let mut s = fx.open(fx.image(8, 512), None).unwrap();
        assert_eq!(s.trusted_root(), empty_root(8, 512));
        for lba in 0..8 {
            assert_eq!(s.protected_read(lba).unwrap(), vec![0u8; 512]);
        }
        assert!(!s.is_dirty());
    }

    #[test]
    fn write_read_flush_reopen() {
        let fx = fixture();
        let mut s = fx.open(fx.image(8, 32), None).unwrap();
        s.protected_write(3, &[7u8; 32]).unwrap();
        assert_eq!(s.protected_read(3).unwrap(), vec![7u8; 32]);
        let root = s.trusted_root();
        let image = s.close().unwrap();
        let mut s = fx.open(image, None).unwrap();
        assert_eq!(s.trusted_root(), root);
        assert_eq!(s.protected_read(3).unwrap(), vec![7u8; 32]);
    }

    #[test]
    fn flush_without_writes_changes_nothing() {
        let fx = fixture();
        let mut s = fx.open(fx.image(4, 32), None).unwrap();
        let before = s.medium_mut().to_bytes().unwrap();
        s.flush().unwrap();
        assert_eq!(s.into_image().into_bytes().unwrap(), before);
    }

    #[test]
    fn illegal_write_detected_on_read_and_write() {
        let fx = fixture();
        let mut s = fx.open(fx.image(8, 32), None).unwrap();
        let phys = s.layout().physical_block(5);
        s.medium_mut().raw_write(phys, &[1u8; 32]).unwrap();
        assert_eq!(s.protected_read(5), Err(AccessError::TamperDetected(5)));
        assert_eq!(
            s.protected_write(5, &[2u8; 32]),
            Err(AccessError::TamperDetected(5))
        );
        // The session stays usable for other blocks.
        assert_eq!(s.protected_read(4).unwrap(), vec![0u8; 32]);
    }

    #[test]
    fn address_checks() {
        let fx = fixture();
        let mut s = fx.open(fx.image(5, 32), None).unwrap();
        assert_eq!(s.host_blocks(), 5);
        assert!(matches!(
            s.protected_read(5),
            Err(AccessError::OutOfRange { .. })
        ));
        assert!(matches!(
            s.protected_read(7),
            Err(AccessError::OutOfRange { .. })
        ));
        assert_eq!(s.protected_read(8), Err(AccessError::Inhibited(8)));
        assert_eq!(
            s.protected_write(9, &[0; 32]),
            Err(AccessError::Inhibited(9))
        );
        assert!(matches!(
            s.protected_write(0, &[0; 31]),
            Err(AccessError::WrongBlockSize { .. })
        ));
    }

    #[test]
    fn shift_blocks_never_reach_host() {
        let fx = fixture();
        let mut s = fx.open(fx.image(4, 32), None).unwrap();
        for lba in 0..4 {
            s.protected_write(lba, &[0xEE; 32]).unwrap();
        }
        let shift_block = s.layout().secure().start;
        assert_eq!(s.medium_mut().raw_read(shift_block).unwrap(), vec![0u8; 32]);
        assert_eq!(s.layout().physical_block(0), shift_block + 1);
    }

    #[test]
    fn access_counters_stay_logarithmic() {
        let fx = fixture();
        let mut s = fx.open(fx.image(16, 32), None).unwrap();
        s.reset_node_access();
        s.protected_read(9).unwrap();
        assert!(s.node_access().reads <= 5 && s.node_access().writes == 0);
        s.reset_node_access();
        s.protected_write(9, &[3; 32]).unwrap();
        let a = s.node_access();
        assert!(a.reads <= 4 && a.writes == 5, "{a:?}");
    }

    #[test]
    fn timer_flushes_after_interval() {
        let fx = fixture();
        let mut s = fx.open(fx.image(4, 32), None).unwrap();
        s.tick(100);
        s.protected_write(0, &[1; 32]).unwrap();
        assert!(s.tick(599).is_none());
        assert!(s.is_dirty());
        assert_eq!(s.tick(600), Some(Ok(())));
        assert!(!s.is_dirty());
        assert!(s.tick(5000).is_none());
    }

    #[test]
    fn second_writer_replaces_certificate() {
        let mut fx = fixture();
        let mut s = fx.open(fx.image(4, 32), None).unwrap();
        s.protected_write(0, &[1; 32]).unwrap();
        let image = s.close().unwrap();
        let other =
            Arc::new(DeviceIdentity::provision(&mut fx.ca, "u-2", Role::Device, [4; 32]).unwrap());
        let mut image = image;
        let layout = authorize_rsd(&mut image).unwrap();
        let mut s = init_session(image, layout, &mut fx.anchor(), other.clone(), None).unwrap();
        s.protected_write(1, &[2; 32]).unwrap();
        let mut image = s.close().unwrap();
        let layout = authorize_rsd(&mut image).unwrap();
        let slot = read_region(
            &mut image,
            layout.certificate_offset(),
            CERTIFICATE_SLOT_LEN,
        )
        .unwrap();
        assert_eq!(Certificate::from_slot(&slot).unwrap(), *other.certificate());
        fx.open(image, None).unwrap();
    }

    #[test]
    fn crash_points_never_accept_silently() {
        let fx = fixture();
        for point in CrashPoint::ALL {
            let mut s = fx.open(fx.image(8, 32), None).unwrap();
            s.protected_write(2, &[9; 32]).unwrap();
            let image = s.crash(point);
            match fx.open(image, None) {
                Err(rej) => assert!(
                    matches!(
                        rej.reason,
                        BlockReason::AdsInconsistent | BlockReason::BadSignature
                    ),
                    "{point:?}: {:?}",
                    rej.reason
                ),
                Ok(mut s) => {
                    assert_eq!(point, CrashPoint::AfterData);
                    assert_eq!(s.protected_read(2), Err(AccessError::TamperDetected(2)));
                }
            }
        }
    }

    #[test]
    fn formatter_signature_over_non_empty_root_rejected() {
        let fx = fixture();
        let mut image = fx.image(4, 32);
        let layout = authorize_rsd(&mut image).unwrap();
        let phys = layout.physical_block(0);
        image.raw_write(phys, &[5; 32]).unwrap();
        let mut tree = MerkleAds::uniform(4, &[0; 32]).unwrap();
        tree.update(0, &[5; 32]).unwrap();
        for (i, d) in tree.nodes().iter().enumerate() {
            image
                .write_at(layout.nodes_offset() + (i * 32) as u64, d.as_bytes())
                .unwrap();
        }
        let sig = fx
            .formatter
            .sign_root(&layout.signing_context(), tree.root());
        image
            .write_at(layout.signature_offset(), &sig.to_slot().unwrap())
            .unwrap();
        let rej = fx.open(image, None).unwrap_err();
        assert_eq!(rej.reason, BlockReason::BadSignature);
    }

    #[test]
    fn registry_rollback_and_outage() {
        let fx = fixture();
        let store = Arc::new(
            CsStore::in_memory(
                vec!["t".into()],
                fx.ca.public_key(),
                fx.ca.revocation_list(0, []),
            )
            .unwrap(),
        );
        let local = LocalRegistry::new(store.clone(), Some("t"));
        let reg: Arc<dyn RootRegistry> = Arc::new(local.clone());

        let mut s = fx.open(fx.image(4, 32), Some(reg.clone())).unwrap();
        let snapshot = s.medium_mut().to_bytes().unwrap();
        s.protected_write(0, &[1; 32]).unwrap();
        let image = s.close().unwrap();
        assert_eq!(store.get_root("disk").unwrap().version, 1);

        let mut old = image;
        old.overwrite(&snapshot).unwrap();
        let rej = fx.open(old, Some(reg.clone())).unwrap_err();
        assert_eq!(rej.reason, BlockReason::RollbackDetected);
        // Without the registry the old state is accepted.
        let mut s = fx.open(rej.image, None).unwrap();
        assert_eq!(s.protected_read(0).unwrap(), vec![0; 32]);

        local.set_online(false);
        let rej = fx.open(s.into_image(), Some(reg.clone())).unwrap_err();
        assert_eq!(rej.reason, BlockReason::CsUnreachable);

        // Reformatting an enrolled medium is a rollback to the empty state.
        local.set_online(true);
        let rej = fx.open(fx.image(4, 32), Some(reg)).unwrap_err();
        assert_eq!(rej.reason, BlockReason::RollbackDetected);
    }

    #[test]
    fn flush_fails_while_registry_down() {
        let fx = fixture();
        let store = Arc::new(
            CsStore::in_memory(
                vec!["t".into()],
                fx.ca.public_key(),
                fx.ca.revocation_list(0, []),
            )
            .unwrap(),
        );
        let local = LocalRegistry::new(store, Some("t"));
        let reg: Arc<dyn RootRegistry> = Arc::new(local.clone());
        let mut s = fx.open(fx.image(4, 32), Some(reg)).unwrap();
        s.protected_write(1, &[4; 32]).unwrap();
        local.set_online(false);
        assert!(matches!(
            s.flush(),
            Err(FlushError::Cs(CsError::Unreachable(_)))
        ));
        assert!(s.is_dirty());
        local.set_online(true);
        s.flush().unwrap();
        assert!(!s.is_dirty());
    }

    #[test]
    fn revoked_last_writer_blocked() {
        let fx = fixture();
        let mut s = fx.open(fx.image(4, 32), None).unwrap();
        s.protected_write(0, &[1; 32]).unwrap();
        let mut image = s.close().unwrap();
        let layout = authorize_rsd(&mut image).unwrap();
        let mut anchor = fx.anchor();
        anchor
            .accept(
                fx.ca
                    .revocation_list(1, [fx.mediator.certificate().serial()]),
            )
            .unwrap();
        let rej = init_session(image, layout, &mut anchor, fx.mediator.clone(), None).unwrap_err();
        assert_eq!(rej.reason, BlockReason::BadCertificate);
        assert!(anchor.accept(fx.ca.revocation_list(1, [])).is_err());
    }
}
