//! Keyed tags for spilled shadow-stack frames.
//!
//! HMAC-SHA256 truncated to 128 bits over
//! `entries (LE) ‖ frame_index (LE) ‖ previous tag`.

use std::fmt;

use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;

pub const TAG_BYTES: usize = 16;
pub type Tag = [u8; TAG_BYTES];

/// Chain head before anything has been spilled.
pub const GENESIS_TAG: Tag = [0; TAG_BYTES];

type HmacSha256 = Hmac<Sha256>;

/// Per-session key. Lives only inside the policy engine.
#[derive(Clone)]
pub struct MacKey([u8; 32]);

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MacKey(..)")
    }
}

impl MacKey {
    pub fn random() -> Self {
        let mut key = [0; 32];
        rand::thread_rng().fill_bytes(&mut key);
        MacKey(key)
    }

    /// Deterministic key for reproducible runs.
    pub fn from_seed(seed: u64) -> Self {
        let mut key = [0; 32];
        ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut key);
        MacKey(key)
    }

    fn hmac(&self, entries: &[u64], frame_index: u64, prev: &Tag) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("HMAC accepts any key length");
        for e in entries {
            mac.update(&e.to_le_bytes());
        }
        mac.update(&frame_index.to_le_bytes());
        mac.update(prev);
        mac
    }

    pub fn frame_tag(&self, entries: &[u64], frame_index: u64, prev: &Tag) -> Tag {
        let full = self
            .hmac(entries, frame_index, prev)
            .finalize()
            .into_bytes();
        let mut tag = [0; TAG_BYTES];
        tag.copy_from_slice(&full[..TAG_BYTES]);
        tag
    }

    /// Constant-time check of a truncated tag.
    pub fn verify(&self, entries: &[u64], frame_index: u64, prev: &Tag, tag: &Tag) -> bool {
        self.hmac(entries, frame_index, prev)
            .verify_truncated_left(tag)
            .is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_separation() {
        let key = MacKey::from_seed(7);
        let entries = [0x8000_0004, 0x8000_0104];
        let t0 = key.frame_tag(&entries, 0, &GENESIS_TAG);
        let t1 = key.frame_tag(&entries, 1, &t0);
        assert_ne!(t0, t1);
        assert_ne!(t0, key.frame_tag(&entries, 1, &GENESIS_TAG));
        assert_ne!(
            t0,
            MacKey::from_seed(8).frame_tag(&entries, 0, &GENESIS_TAG)
        );
        assert!(key.verify(&entries, 1, &t0, &t1));
        assert!(!key.verify(&entries, 1, &GENESIS_TAG, &t1));
    }

    #[test]
    fn key_debug_is_redacted() {
        assert_eq!(format!("{:?}", MacKey::from_seed(1)), "MacKey(..)");
    }
}
