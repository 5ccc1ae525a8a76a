//! Stable seed derivation.

/// splitmix64 finalizer.
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a path of integers, e.g.
/// `mix(seed, &[class, index])` or `mix(seed, &[epoch])`.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(finalize(seed), |acc, &p| {
        finalize(acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0x2545_f491_4f6c_dd1d))
    })
}
