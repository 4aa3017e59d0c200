//! Stable seed derivation: a master seed combined with a label through a
//! splitmix-style 64-bit mix, so each stage (or named sub-stream) gets an
//! independent, reproducible RNG seed.

/// splitmix64 finalizer.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed from `(master, label)`: the label bytes are folded
/// in FNV-1a style, then finalized with [`splitmix64`].
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = master ^ 0x9E37_79B9_7F4A_7C15;
    for &b in label.as_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(h)
}
