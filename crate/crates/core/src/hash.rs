//! 64-bit FNV-1a digests used for every provenance hash in the crate.

use std::hash::Hasher;

use fnv::FnvHasher;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Incremental digest over several byte slices, equal to `fnv1a` of their concatenation.
#[derive(Default)]
pub struct Digest(FnvHasher);

impl Digest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.write(bytes);
    }

    pub fn finish(&self) -> u64 {
        self.0.finish()
    }
}

pub fn to_hex(h: u64) -> String {
    format!("{h:016x}")
}

pub fn from_hex(s: &str) -> Option<u64> {
    if s.len() != 16 {
        return None;
    }
    u64::from_str_radix(s, 16).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vectors() {
        // Reference FNV-1a 64 values.
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn incremental_matches_oneshot() {
        let mut d = Digest::new();
        d.update(b"foo");
        d.update(b"bar");
        assert_eq!(d.finish(), fnv1a(b"foobar"));
    }

    #[test]
    fn hex_roundtrip() {
        let h = 0x0123_4567_89ab_cdef;
        assert_eq!(from_hex(&to_hex(h)), Some(h));
        assert_eq!(from_hex("xyz"), None);
    }
}
