//! Deterministic seed derivation for independent RNG streams.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent child seed from a base seed and two stream
/// coordinates (for example recording id and purpose, or epoch and step), so
/// parallel or repeated consumers never share RNG state.
pub fn derive_seed(base: u64, id: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base).wrapping_add(id)).wrapping_add(stream))
}
