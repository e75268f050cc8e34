//! Named sub-seeds derived from one experiment seed.

/// Stable across platforms and compiler versions: FNV-1a over the name,
/// mixed with the master seed through splitmix64.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const THETA_INIT: &str = "theta-init";
pub const POOL_SHUFFLE: &str = "pool-shuffle";
pub const AA_ENROLLMENT: &str = "aa-enrollment";
