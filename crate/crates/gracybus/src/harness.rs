//! Deterministic scenario support: a certificate authority seeded from the
//! scenario seed, and engine constructors that issue device certificates
//! under it. The scenario runner, the CLI, and the test suites all build
//! their devices through this.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::{CipherSuiteId, provider_for};
use crate::engine::MemberState;
use crate::pki::{Certificate, TrustAnchor, issue_certificate};

/// CA name used in generated scenarios.
pub const SCENARIO_CA: &str = "scenario-ca";

pub struct TestCa {
    suite: CipherSuiteId,
    anchor: TrustAnchor,
    ca_private: Vec<u8>,
}

impl TestCa {
    /// CA keyed deterministically from a seed (the scenario seed in practice).
    pub fn new(seed: u64) -> TestCa {
        TestCa::with_suite(CipherSuiteId::TOY, seed)
    }

    pub fn with_suite(suite: CipherSuiteId, seed: u64) -> TestCa {
        let provider = provider_for(suite).expect("suite available");
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xca15_ca15_ca15_ca15);
        let pair = provider.keypair_random(&mut rng);
        TestCa {
            suite,
            anchor: TrustAnchor {
                ca_name: SCENARIO_CA.to_string(),
                ca_public: pair.public,
            },
            ca_private: pair.private,
        }
    }

    pub fn anchor(&self) -> &TrustAnchor {
        &self.anchor
    }

    pub fn suite(&self) -> CipherSuiteId {
        self.suite
    }

    /// Issue a certificate for a fresh device key pair derived from `seed`.
    pub fn issue(&self, identity: &str, seed: u64) -> (Certificate, Vec<u8>) {
        let provider = provider_for(self.suite).expect("suite available");
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0xdec1_ce00_0000_0000);
        let pair = provider.keypair_random(&mut rng);
        let cert = issue_certificate(
            provider.as_ref(),
            &self.ca_private,
            &self.anchor.ca_name,
            identity,
            &pair.public,
        )
        .expect("issue");
        (cert, pair.private)
    }

    /// A certificate signed by an unrelated key claiming this CA's name;
    /// must be rejected everywhere.
    pub fn rogue_cert(&self, identity: &str, seed: u64) -> (Certificate, Vec<u8>) {
        let provider = provider_for(self.suite).expect("suite available");
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0bad_0bad_0bad_0bad);
        let rogue_ca = provider.keypair_random(&mut rng);
        let pair = provider.keypair_random(&mut rng);
        let cert = issue_certificate(
            provider.as_ref(),
            &rogue_ca.private,
            &self.anchor.ca_name,
            identity,
            &pair.public,
        )
        .expect("issue");
        (cert, pair.private)
    }

    /// A founding member with a group of one.
    pub fn member_engine(&self, identity: &str, window: u64, rng_seed: u64) -> MemberState {
        let (cert, private) = self.issue(identity, rng_seed);
        MemberState::create_group(
            identity,
            self.suite,
            cert,
            private,
            self.anchor.clone(),
            window,
            rng_seed,
        )
        .expect("create group")
    }

    /// A device ready to request a join.
    pub fn joiner_engine(&self, identity: &str, window: u64, rng_seed: u64) -> MemberState {
        let (cert, private) = self.issue(identity, rng_seed);
        MemberState::new_device(
            identity,
            self.suite,
            cert,
            private,
            self.anchor.clone(),
            window,
            rng_seed,
        )
        .expect("new device")
    }

    /// A device presenting a rogue certificate (authenticity tests).
    pub fn rogue_joiner_engine(&self, identity: &str, window: u64, rng_seed: u64) -> MemberState {
        let (cert, private) = self.rogue_cert(identity, rng_seed);
        MemberState::new_device(
            identity,
            self.suite,
            cert,
            private,
            self.anchor.clone(),
            window,
            rng_seed,
        )
        .expect("new device")
    }
}
