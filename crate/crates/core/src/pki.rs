//! Certification authority, device identities, root signatures and
//! revocation lists.
//!
//! All signatures are Ed25519. Every signed message starts with its own
//! ASCII context string so a signature over one kind of object can never be
//! replayed as another.
//!
//! Binary encodings (all integers little-endian):
//!
//! ```text
//! Certificate   "UCRT" | ver u8 | role u8 | subject_len u8 | subject | public_key[32] | serial u64 | ca_sig[64]
//! RootSignature "USIG" | ver u8 | root[32] | sig[64]
//! RevocationList "UCRL" | ver u8 | version u64 | count u32 | serial u64 * count (ascending) | ca_sig[64]
//! ```
//!
//! Certificates and root signatures live in fixed, zero-padded slots inside
//! the ADS partition; see [`CERTIFICATE_SLOT_LEN`] and [`ROOT_SIGNATURE_SLOT_LEN`].

use std::collections::BTreeSet;
use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::RngCore;
use thiserror::Error;

use crate::merkle::Digest;

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const MAX_SUBJECT_LEN: usize = 64;
pub const CERTIFICATE_SLOT_LEN: usize = 256;
pub const ROOT_SIGNATURE_SLOT_LEN: usize = 128;

const CERT_MAGIC: &[u8; 4] = b"UCRT";
const SIG_MAGIC: &[u8; 4] = b"USIG";
const CRL_MAGIC: &[u8; 4] = b"UCRL";
const ENCODING_VERSION: u8 = 1;

const CERT_CONTEXT: &[u8] = b"ucap-certificate-v1";
const ROOT_CONTEXT: &[u8] = b"ucap-root-v1";
const CRL_CONTEXT: &[u8] = b"ucap-revocation-v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PkiError {
    #[error("subject id must be 1..={MAX_SUBJECT_LEN} printable ASCII bytes without spaces")]
    BadSubject,
    #[error("{0} encoding is truncated")]
    Truncated(&'static str),
    #[error("{0} encoding has bad magic")]
    BadMagic(&'static str),
    #[error("{what} encoding version {version} is not supported")]
    Version { what: &'static str, version: u8 },
    #[error("unknown certificate role {0}")]
    Role(u8),
    #[error("{0} encoding has trailing bytes")]
    Trailing(&'static str),
    #[error("revocation serials must be strictly ascending")]
    UnsortedSerials,
    #[error("revocation list version {offered} is not newer than {current}")]
    StaleRevocationList { offered: u64, current: u64 },
    #[error("revocation list signature does not verify")]
    BadRevocationSignature,
    #[error("certificate serial space exhausted")]
    SerialsExhausted,
    #[error("encoding does not fit its {0}-byte slot")]
    SlotOverflow(usize),
}

fn valid_subject(s: &str) -> bool {
    !s.is_empty() && s.len() <= MAX_SUBJECT_LEN && s.bytes().all(|b| b.is_ascii_graphic())
}

/// What a certified key is allowed to sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// A mediating device; may sign any root.
    Device,
    /// The partition formatter; its signature is only honoured over an
    /// empty secure partition.
    Formatter,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Device => 1,
            Role::Formatter => 2,
        }
    }

    fn from_code(b: u8) -> Result<Self, PkiError> {
        match b {
            1 => Ok(Role::Device),
            2 => Ok(Role::Formatter),
            other => Err(PkiError::Role(other)),
        }
    }
}

/// Little cursor over an encoding, used by all decoders here.
struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PkiError> {
        if self.buf.len() < n {
            return Err(PkiError::Truncated(self.what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], PkiError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, PkiError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PkiError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, PkiError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), PkiError> {
        if self.take(4)? != magic {
            return Err(PkiError::BadMagic(self.what));
        }
        let version = self.u8()?;
        if version != ENCODING_VERSION {
            return Err(PkiError::Version {
                what: self.what,
                version,
            });
        }
        Ok(())
    }

    fn finish(self) -> Result<(), PkiError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(PkiError::Trailing(self.what))
        }
    }

    fn finish_padding(self) -> Result<(), PkiError> {
        if self.buf.iter().all(|&b| b == 0) {
            Ok(())
        } else {
            Err(PkiError::Trailing(self.what))
        }
    }
}

fn to_slot(mut bytes: Vec<u8>, len: usize) -> Result<Vec<u8>, PkiError> {
    if bytes.len() > len {
        return Err(PkiError::SlotOverflow(len));
    }
    bytes.resize(len, 0);
    Ok(bytes)
}

fn verify_sig(key: &[u8; PUBLIC_KEY_LEN], message: &[u8], sig: &[u8; SIGNATURE_LEN]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(key) else {
        return false;
    };
    vk.verify_strict(message, &Signature::from_bytes(sig))
        .is_ok()
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct CaPublicKey([u8; PUBLIC_KEY_LEN]);

impl CaPublicKey {
    pub fn from_bytes(bytes: [u8; PUBLIC_KEY_LEN]) -> Self {
        CaPublicKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for CaPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CaPublicKey({})", hex::encode(self.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    subject_id: String,
    role: Role,
    public_key: [u8; PUBLIC_KEY_LEN],
    serial: u64,
    ca_signature: [u8; SIGNATURE_LEN],
}

impl Certificate {
    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn public_key(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.public_key
    }

    pub fn serial(&self) -> u64 {
        self.serial
    }

    pub fn ca_signature(&self) -> &[u8; SIGNATURE_LEN] {
        &self.ca_signature
    }

    pub fn ca_signature_mut(&mut self) -> &mut [u8; SIGNATURE_LEN] {
        &mut self.ca_signature
    }

    fn signed_message(
        subject_id: &str,
        role: Role,
        public_key: &[u8; PUBLIC_KEY_LEN],
        serial: u64,
    ) -> Vec<u8> {
        let mut m = Vec::with_capacity(CERT_CONTEXT.len() + 2 + subject_id.len() + 40);
        m.extend_from_slice(CERT_CONTEXT);
        m.push(role.code());
        m.push(subject_id.len() as u8);
        m.extend_from_slice(subject_id.as_bytes());
        m.extend_from_slice(public_key);
        m.extend_from_slice(&serial.to_le_bytes());
        m
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + self.subject_id.len() + 104);
        out.extend_from_slice(CERT_MAGIC);
        out.push(ENCODING_VERSION);
        out.push(self.role.code());
        out.push(self.subject_id.len() as u8);
        out.extend_from_slice(self.subject_id.as_bytes());
        out.extend_from_slice(&self.public_key);
        out.extend_from_slice(&self.serial.to_le_bytes());
        out.extend_from_slice(&self.ca_signature);
        out
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, PkiError> {
        r.header(CERT_MAGIC)?;
        let role = Role::from_code(r.u8()?)?;
        let len = r.u8()? as usize;
        let subject = r.take(len)?;
        let subject_id = std::str::from_utf8(subject)
            .ok()
            .filter(|s| valid_subject(s))
            .ok_or(PkiError::BadSubject)?
            .to_owned();
        Ok(Certificate {
            subject_id,
            role,
            public_key: r.array()?,
            serial: r.u64()?,
            ca_signature: r.array()?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PkiError> {
        let mut r = Reader {
            buf: bytes,
            what: "certificate",
        };
        let cert = Self::read(&mut r)?;
        r.finish()?;
        Ok(cert)
    }

    pub fn to_slot(&self) -> Result<Vec<u8>, PkiError> {
        to_slot(self.encode(), CERTIFICATE_SLOT_LEN)
    }

    /// Decodes a zero-padded slot; nonzero padding is rejected.
    pub fn from_slot(slot: &[u8]) -> Result<Self, PkiError> {
        let mut r = Reader {
            buf: slot,
            what: "certificate",
        };
        let cert = Self::read(&mut r)?;
        r.finish_padding()?;
        Ok(cert)
    }
}

/// True iff the CA signature verifies and the serial is not revoked.
pub fn verify_certificate(
    cert: &Certificate,
    ca: &CaPublicKey,
    revoked: Option<&RevocationList>,
) -> bool {
    if !valid_subject(&cert.subject_id) {
        return false;
    }
    let message =
        Certificate::signed_message(&cert.subject_id, cert.role, &cert.public_key, cert.serial);
    if !verify_sig(&ca.0, &message, &cert.ca_signature) {
        return false;
    }
    !revoked.is_some_and(|crl| crl.contains(cert.serial))
}

pub struct CertificateAuthority {
    key: SigningKey,
    next_serial: u64,
}

impl fmt::Debug for CertificateAuthority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CertificateAuthority")
            .field("public_key", &self.public_key())
            .field("next_serial", &self.next_serial)
            .finish_non_exhaustive()
    }
}

impl CertificateAuthority {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        CertificateAuthority {
            key: SigningKey::from_bytes(&seed),
            next_serial: 1,
        }
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn public_key(&self) -> CaPublicKey {
        CaPublicKey(self.key.verifying_key().to_bytes())
    }

    pub fn issue(
        &mut self,
        subject_id: &str,
        role: Role,
        public_key: [u8; PUBLIC_KEY_LEN],
    ) -> Result<Certificate, PkiError> {
        if !valid_subject(subject_id) {
            return Err(PkiError::BadSubject);
        }
        let serial = self.next_serial;
        self.next_serial = serial.checked_add(1).ok_or(PkiError::SerialsExhausted)?;
        let message = Certificate::signed_message(subject_id, role, &public_key, serial);
        Ok(Certificate {
            subject_id: subject_id.to_owned(),
            role,
            public_key,
            serial,
            ca_signature: self.key.sign(&message).to_bytes(),
        })
    }

    pub fn revocation_list(
        &self,
        version: u64,
        revoked: impl IntoIterator<Item = u64>,
    ) -> RevocationList {
        let revoked: BTreeSet<u64> = revoked.into_iter().collect();
        let message = RevocationList::signed_message(version, &revoked);
        RevocationList {
            version,
            revoked,
            ca_signature: self.key.sign(&message).to_bytes(),
        }
    }
}

/// A mediating device (or the formatter): its private key and certificate.
/// The private key is never encoded.
pub struct DeviceIdentity {
    key: SigningKey,
    certificate: Certificate,
}

impl fmt::Debug for DeviceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceIdentity")
            .field("device_id", &self.certificate.subject_id)
            .field("serial", &self.certificate.serial)
            .finish_non_exhaustive()
    }
}

impl DeviceIdentity {
    /// Creates a key from `seed` and has `ca` certify it.
    pub fn provision(
        ca: &mut CertificateAuthority,
        device_id: &str,
        role: Role,
        seed: [u8; 32],
    ) -> Result<Self, PkiError> {
        let key = SigningKey::from_bytes(&seed);
        let certificate = ca.issue(device_id, role, key.verifying_key().to_bytes())?;
        Ok(DeviceIdentity { key, certificate })
    }

    pub fn generate<R: RngCore + ?Sized>(
        ca: &mut CertificateAuthority,
        device_id: &str,
        role: Role,
        rng: &mut R,
    ) -> Result<Self, PkiError> {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::provision(ca, device_id, role, seed)
    }

    pub fn device_id(&self) -> &str {
        &self.certificate.subject_id
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }

    /// Signs `root` bound to `context` (the medium id and layout header).
    pub fn sign_root(&self, context: &[u8], root: Digest) -> RootSignature {
        let message = RootSignature::signed_message(context, &root);
        RootSignature {
            root,
            signature: self.key.sign(&message).to_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootSignature {
    root: Digest,
    signature: [u8; SIGNATURE_LEN],
}

pub const ROOT_SIGNATURE_ENCODED_LEN: usize = 5 + 32 + SIGNATURE_LEN;

impl RootSignature {
    pub fn root(&self) -> Digest {
        self.root
    }

    pub fn signature(&self) -> &[u8; SIGNATURE_LEN] {
        &self.signature
    }

    fn signed_message(context: &[u8], root: &Digest) -> Vec<u8> {
        let mut m = Vec::with_capacity(ROOT_CONTEXT.len() + 4 + context.len() + 32);
        m.extend_from_slice(ROOT_CONTEXT);
        m.extend_from_slice(&(context.len() as u32).to_le_bytes());
        m.extend_from_slice(context);
        m.extend_from_slice(root.as_bytes());
        m
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ROOT_SIGNATURE_ENCODED_LEN);
        out.extend_from_slice(SIG_MAGIC);
        out.push(ENCODING_VERSION);
        out.extend_from_slice(self.root.as_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, PkiError> {
        r.header(SIG_MAGIC)?;
        Ok(RootSignature {
            root: Digest::from_bytes(r.array()?),
            signature: r.array()?,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PkiError> {
        let mut r = Reader {
            buf: bytes,
            what: "root signature",
        };
        let sig = Self::read(&mut r)?;
        r.finish()?;
        Ok(sig)
    }

    pub fn to_slot(&self) -> Result<Vec<u8>, PkiError> {
        to_slot(self.encode(), ROOT_SIGNATURE_SLOT_LEN)
    }

    pub fn from_slot(slot: &[u8]) -> Result<Self, PkiError> {
        let mut r = Reader {
            buf: slot,
            what: "root signature",
        };
        let sig = Self::read(&mut r)?;
        r.finish_padding()?;
        Ok(sig)
    }
}

pub fn verify_root_signature(cert: &Certificate, context: &[u8], sig: &RootSignature) -> bool {
    let message = RootSignature::signed_message(context, &sig.root);
    verify_sig(&cert.public_key, &message, &sig.signature)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevocationList {
    version: u64,
    revoked: BTreeSet<u64>,
    ca_signature: [u8; SIGNATURE_LEN],
}

impl RevocationList {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn revoked(&self) -> &BTreeSet<u64> {
        &self.revoked
    }

    pub fn contains(&self, serial: u64) -> bool {
        self.revoked.contains(&serial)
    }

    fn signed_message(version: u64, revoked: &BTreeSet<u64>) -> Vec<u8> {
        let mut m = Vec::with_capacity(CRL_CONTEXT.len() + 12 + revoked.len() * 8);
        m.extend_from_slice(CRL_CONTEXT);
        m.extend_from_slice(&version.to_le_bytes());
        m.extend_from_slice(&(revoked.len() as u32).to_le_bytes());
        for s in revoked {
            m.extend_from_slice(&s.to_le_bytes());
        }
        m
    }

    pub fn verify(&self, ca: &CaPublicKey) -> bool {
        verify_sig(
            &ca.0,
            &Self::signed_message(self.version, &self.revoked),
            &self.ca_signature,
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.revoked.len() * 8 + SIGNATURE_LEN);
        out.extend_from_slice(CRL_MAGIC);
        out.push(ENCODING_VERSION);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.revoked.len() as u32).to_le_bytes());
        for s in &self.revoked {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.ca_signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PkiError> {
        let mut r = Reader {
            buf: bytes,
            what: "revocation list",
        };
        r.header(CRL_MAGIC)?;
        let version = r.u64()?;
        let count = r.u32()? as usize;
        if r.buf.len() < count.saturating_mul(8) {
            return Err(PkiError::Truncated("revocation list"));
        }
        let mut revoked = BTreeSet::new();
        let mut last = None;
        for _ in 0..count {
            let s = r.u64()?;
            if last.is_some_and(|l| s <= l) {
                return Err(PkiError::UnsortedSerials);
            }
            last = Some(s);
            revoked.insert(s);
        }
        let ca_signature = r.array()?;
        r.finish()?;
        Ok(RevocationList {
            version,
            revoked,
            ca_signature,
        })
    }
}

/// The newest revocation list a consumer has accepted.
#[derive(Debug, Clone, Default)]
pub struct RevocationState {
    current: Option<RevocationList>,
}

impl RevocationState {
    pub fn current(&self) -> Option<&RevocationList> {
        self.current.as_ref()
    }

    /// Accepts `list` if it is CA-signed and strictly newer than the current one.
    pub fn accept(&mut self, list: RevocationList, ca: &CaPublicKey) -> Result<(), PkiError> {
        if !list.verify(ca) {
            return Err(PkiError::BadRevocationSignature);
        }
        if let Some(cur) = &self.current {
            if list.version <= cur.version {
                return Err(PkiError::StaleRevocationList {
                    offered: list.version,
                    current: cur.version,
                });
            }
        }
        self.current = Some(list);
        Ok(())
    }
}
