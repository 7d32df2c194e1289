//! Deterministic key material for simulations and tests: a CA, a formatter
//! and one mediating device, all derived from a single seed.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::cs::CsStore;
use crate::integrity::TrustAnchor;
use crate::pki::{CertificateAuthority, DeviceIdentity, RevocationList, Role};

pub const FORMATTER_ID: &str = "formatter";
pub const MEDIATOR_ID: &str = "mediator-1";
pub const CS_TOKEN: &str = "mediator-token";

pub struct Fixture {
    pub ca: CertificateAuthority,
    pub formatter: DeviceIdentity,
    pub mediator: Arc<DeviceIdentity>,
    rng: ChaCha20Rng,
    crl_version: u64,
    revoked: Vec<u64>,
}

impl Fixture {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut ca = CertificateAuthority::generate(&mut rng);
        let formatter = DeviceIdentity::generate(&mut ca, FORMATTER_ID, Role::Formatter, &mut rng)
            .expect("valid subject");
        let mediator = DeviceIdentity::generate(&mut ca, MEDIATOR_ID, Role::Device, &mut rng)
            .expect("valid subject");
        Fixture {
            ca,
            formatter,
            mediator: Arc::new(mediator),
            rng,
            crl_version: 0,
            revoked: Vec::new(),
        }
    }

    /// Another mediating device certified by the same CA.
    pub fn new_mediator(&mut self, device_id: &str) -> Arc<DeviceIdentity> {
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut seed);
        Arc::new(
            DeviceIdentity::provision(&mut self.ca, device_id, Role::Device, seed)
                .expect("valid subject"),
        )
    }

    /// The current revocation list.
    pub fn revocation_list(&self) -> RevocationList {
        self.ca
            .revocation_list(self.crl_version, self.revoked.iter().copied())
    }

    /// Issues a new list version that also revokes `serial`.
    pub fn revoke(&mut self, serial: u64) -> RevocationList {
        self.revoked.push(serial);
        self.crl_version += 1;
        self.revocation_list()
    }

    pub fn anchor(&self) -> TrustAnchor {
        TrustAnchor::new(self.ca.public_key(), self.revocation_list()).expect("own list")
    }

    pub fn cs_store(&self) -> CsStore {
        CsStore::in_memory(
            vec![CS_TOKEN.into()],
            self.ca.public_key(),
            self.revocation_list(),
        )
        .expect("own list")
    }
}
