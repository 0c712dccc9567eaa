//! Epoch chain: each group operation produces a root secret, and the next
//! epoch key is derived from it together with the previous epoch key. Only
//! the current key is ever retained; advancing overwrites the old one.

use thiserror::Error;

use crate::crypto::{CryptoError, CryptoProvider};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("secret must not be empty")]
    EmptySecret,
    #[error("crypto: {0}")]
    Crypto(#[from] CryptoError),
}

/// Epoch counter plus the one live traffic key. There is deliberately no
/// accessor for any earlier key; `advance` destroys it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochState {
    epoch: u64,
    epoch_key: Vec<u8>,
}

impl EpochState {
    /// Epoch 0. The previous-key input is a zero block of the suite key
    /// length, which keeps genesis deterministic.
    pub fn genesis(
        provider: &dyn CryptoProvider,
        root_secret: &[u8],
    ) -> Result<EpochState, ScheduleError> {
        if root_secret.is_empty() {
            return Err(ScheduleError::EmptySecret);
        }
        let zero = vec![0u8; provider.params().epoch_key_len];
        let epoch_key = provider.kdf(root_secret, &zero)?;
        Ok(EpochState {
            epoch: 0,
            epoch_key,
        })
    }

    /// Install a key received verbatim (the joiner path; no derivation).
    pub fn install(epoch: u64, epoch_key: Vec<u8>) -> EpochState {
        EpochState { epoch, epoch_key }
    }

    /// Next epoch: key = KDF(root secret, previous key). The previous key is
    /// overwritten in place.
    pub fn advance(
        &mut self,
        provider: &dyn CryptoProvider,
        root_secret: &[u8],
    ) -> Result<(), ScheduleError> {
        if root_secret.is_empty() {
            return Err(ScheduleError::EmptySecret);
        }
        let next = provider.kdf(root_secret, &self.epoch_key)?;
        self.epoch_key = next;
        self.epoch += 1;
        Ok(())
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn key(&self) -> &[u8] {
        &self.epoch_key
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{CipherSuiteId, provider_for};

    #[test]
    fn genesis_matches_kdf_of_zero_block() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let state = EpochState::genesis(p.as_ref(), b"root").unwrap();
        assert_eq!(state.epoch(), 0);
        assert_eq!(state.key(), p.kdf(b"root", &[0u8; 8]).unwrap());
        // frozen: fnv("root" ‖ 0x7c ‖ 0x00*8)
        assert_eq!(state.key(), 0x6257f80df38978bbu64.to_be_bytes());
        assert_eq!(
            EpochState::genesis(p.as_ref(), b"").err(),
            Some(ScheduleError::EmptySecret)
        );
    }

    #[test]
    fn distinct_secrets_distinct_genesis_keys() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let a = EpochState::genesis(p.as_ref(), b"alpha").unwrap();
        let b = EpochState::genesis(p.as_ref(), b"bravo").unwrap();
        assert_ne!(a.key(), b.key());
    }

    #[test]
    fn advance_increments_and_chains() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let mut state = EpochState::genesis(p.as_ref(), b"a").unwrap();
        state.advance(p.as_ref(), b"b").unwrap();
        assert_eq!(state.epoch(), 1);

        // manual recomposition with standalone kdf calls
        let k0 = p.kdf(b"a", &[0u8; 8]).unwrap();
        let k1 = p.kdf(b"b", &k0).unwrap();
        assert_eq!(state.key(), k1);

        state.advance(p.as_ref(), b"c").unwrap();
        let k2 = p.kdf(b"c", &k1).unwrap();
        assert_eq!(state.epoch(), 2);
        assert_eq!(state.key(), k2);
    }

    #[test]
    fn perturbing_any_secret_changes_all_later_keys() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let secrets: Vec<&[u8]> = vec![b"s1", b"s2", b"s3", b"s4"];
        let run = |secrets: &[&[u8]]| {
            let mut st = EpochState::genesis(p.as_ref(), b"g").unwrap();
            let mut keys = vec![st.key().to_vec()];
            for s in secrets {
                st.advance(p.as_ref(), s).unwrap();
                keys.push(st.key().to_vec());
            }
            keys
        };
        let base = run(&secrets);
        for i in 0..secrets.len() {
            let mut perturbed = secrets.clone();
            perturbed[i] = b"xx";
            let keys = run(&perturbed);
            for e in (i + 1)..=secrets.len() {
                assert_ne!(base[e], keys[e], "epoch {e} must differ after perturbing {i}");
            }
        }
    }

    #[test]
    fn exactly_one_d_per_advance() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let mut state = EpochState::genesis(p.as_ref(), b"a").unwrap();
        p.counters_reset();
        state.advance(p.as_ref(), b"b").unwrap();
        let c = p.counters();
        assert_eq!(c.d, 1);
        assert_eq!(c.total(), 1);
    }

    #[test]
    fn state_holds_only_current_key() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let mut state = EpochState::genesis(p.as_ref(), b"a").unwrap();
        let old = state.key().to_vec();
        state.advance(p.as_ref(), b"b").unwrap();
        // the struct has exactly (epoch, key); a full debug print must not
        // contain the previous key
        let dump = format!("{state:?}");
        assert!(!dump.contains(&hex::encode(&old)));
        assert_ne!(state.key(), old);
    }
}
