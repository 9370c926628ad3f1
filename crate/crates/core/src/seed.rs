//! Deterministic seed derivation for chains, retries, variants and splits.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derive a child seed from a base seed and an integer stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix64(mix64(base) ^ mix64(stream.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Derive a child seed from a base seed and a textual tag.
pub fn derive_seed_str(base: u64, tag: &str) -> u64 {
    derive_seed(base, fnv1a(tag.as_bytes()))
}
