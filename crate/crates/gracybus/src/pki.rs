//! Minimal trust-anchor layer: a test CA issuing device certificates and the
//! chain verification used to authenticate join handshakes. Single-level
//! chains only; scenario time is logical so certificates carry no validity
//! period.

use thiserror::Error;

use crate::crypto::CryptoProvider;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PkiError {
    #[error("identity must not be empty")]
    EmptyIdentity,
    #[error("crypto: {0}")]
    Crypto(#[from] crate::crypto::CryptoError),
}

/// A device certificate: CA signature over the identity and subject key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub identity: String,
    pub subject_public: Vec<u8>,
    pub issuer: String,
    pub signature: Vec<u8>,
}

/// The one trust anchor every member holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustAnchor {
    pub ca_name: String,
    pub ca_public: Vec<u8>,
}

// To-be-signed bytes: length-prefixed identity ‖ subject key, so the pair is
// unambiguous.
fn tbs(identity: &str, subject_public: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + identity.len() + subject_public.len());
    out.extend_from_slice(&(identity.len() as u16).to_be_bytes());
    out.extend_from_slice(identity.as_bytes());
    out.extend_from_slice(&(subject_public.len() as u16).to_be_bytes());
    out.extend_from_slice(subject_public);
    out
}

/// Issue a certificate under the CA key. Counts one S.
pub fn issue_certificate(
    provider: &dyn CryptoProvider,
    ca_private: &[u8],
    ca_name: &str,
    identity: &str,
    subject_public: &[u8],
) -> Result<Certificate, PkiError> {
    if identity.is_empty() {
        return Err(PkiError::EmptyIdentity);
    }
    let signature = provider.sign(ca_private, &tbs(identity, subject_public))?;
    Ok(Certificate {
        identity: identity.to_string(),
        subject_public: subject_public.to_vec(),
        issuer: ca_name.to_string(),
        signature,
    })
}

/// Accept iff the CA signature is valid and the issuer matches the anchor.
/// Counts one V. Reject is a value, not an error.
pub fn verify_certificate(
    provider: &dyn CryptoProvider,
    anchor: &TrustAnchor,
    cert: &Certificate,
) -> bool {
    if cert.issuer != anchor.ca_name {
        return false;
    }
    provider
        .verify(
            &anchor.ca_public,
            &tbs(&cert.identity, &cert.subject_public),
            &cert.signature,
        )
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{CipherSuiteId, provider_for};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Ca {
        anchor: TrustAnchor,
        private: Vec<u8>,
    }

    fn make_ca(provider: &dyn CryptoProvider, name: &str, seed: u64) -> Ca {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let pair = provider.keypair_random(&mut rng);
        Ca {
            anchor: TrustAnchor {
                ca_name: name.to_string(),
                ca_public: pair.public,
            },
            private: pair.private,
        }
    }

    #[test]
    fn issue_then_verify_round_trip() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let ca = make_ca(p.as_ref(), "scenario-ca", 1);
        let cert =
            issue_certificate(p.as_ref(), &ca.private, "scenario-ca", "device-a", &[9u8; 8])
                .unwrap();
        assert!(verify_certificate(p.as_ref(), &ca.anchor, &cert));
    }

    #[test]
    fn wrong_anchor_rejects() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let ca1 = make_ca(p.as_ref(), "ca-one", 2);
        let ca2 = make_ca(p.as_ref(), "ca-two", 3);
        let cert =
            issue_certificate(p.as_ref(), &ca1.private, "ca-one", "device-a", &[9u8; 8]).unwrap();
        assert!(!verify_certificate(p.as_ref(), &ca2.anchor, &cert));
    }

    #[test]
    fn self_signed_from_unknown_ca_rejects() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let real = make_ca(p.as_ref(), "scenario-ca", 4);
        let rogue = make_ca(p.as_ref(), "scenario-ca", 5); // same name, different key
        let cert =
            issue_certificate(p.as_ref(), &rogue.private, "scenario-ca", "mallory", &[1u8; 8])
                .unwrap();
        assert!(!verify_certificate(p.as_ref(), &real.anchor, &cert));
    }

    #[test]
    fn identity_tamper_sweep_rejects() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let ca = make_ca(p.as_ref(), "scenario-ca", 6);
        let cert =
            issue_certificate(p.as_ref(), &ca.private, "scenario-ca", "device-ab", &[9u8; 8])
                .unwrap();
        for i in 0..cert.identity.len() {
            let mut bytes = cert.identity.clone().into_bytes();
            bytes[i] ^= 0x01;
            let tampered = Certificate {
                identity: String::from_utf8(bytes).unwrap(),
                ..cert.clone()
            };
            assert!(!verify_certificate(p.as_ref(), &ca.anchor, &tampered));
        }
        for i in 0..cert.subject_public.len() {
            let mut tampered = cert.clone();
            tampered.subject_public[i] ^= 0x01;
            assert!(!verify_certificate(p.as_ref(), &ca.anchor, &tampered));
        }
    }

    #[test]
    fn empty_identity_rejected_at_issue() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let ca = make_ca(p.as_ref(), "scenario-ca", 7);
        assert_eq!(
            issue_certificate(p.as_ref(), &ca.private, "scenario-ca", "", &[9u8; 8]),
            Err(PkiError::EmptyIdentity)
        );
    }

    #[test]
    fn verification_counts_exactly_one_v() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let ca = make_ca(p.as_ref(), "scenario-ca", 8);
        let cert =
            issue_certificate(p.as_ref(), &ca.private, "scenario-ca", "device-a", &[9u8; 8])
                .unwrap();
        p.counters_reset();
        assert!(verify_certificate(p.as_ref(), &ca.anchor, &cert));
        let c = p.counters();
        assert_eq!(c.v, 1);
        assert_eq!(c.total(), 1);
    }

    #[test]
    fn issue_counts_one_s() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let ca = make_ca(p.as_ref(), "scenario-ca", 9);
        p.counters_reset();
        issue_certificate(p.as_ref(), &ca.private, "scenario-ca", "device-a", &[9u8; 8]).unwrap();
        assert_eq!(p.counters().s, 1);
    }
}
