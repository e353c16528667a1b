//! Deterministic seed derivation. Every stochastic stage mixes its
//! purpose tag into the run seed so streams never collide and results
//! never depend on iteration order.

/// splitmix64 finalizer.
fn finalize(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    z
}

pub(crate) fn mix2(a: u64, b: u64) -> u64 {
    finalize(
        a.wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(b.wrapping_mul(0xbf58476d1ce4e5b9))
            .wrapping_add(0x94d049bb133111eb),
    )
}

pub(crate) fn mix3(a: u64, b: u64, c: u64) -> u64 {
    mix2(mix2(a, b), c)
}

/// FNV-1a over a string, for per-subject streams.
pub(crate) fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in s.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
