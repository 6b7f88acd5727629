use rand::Rng;

/// FNV-1a, used for corpus fingerprints and config fingerprints. Stable
/// across platforms; not cryptographic, only an identity check.
pub(crate) fn fnv1a64(bytes: &[u8], mut state: u64) -> u64 {
    if state == 0 {
        state = 0xcbf2_9ce4_8422_2325;
    }
    for &b in bytes {
        state ^= u64::from(b);
        state = state.wrapping_mul(0x0000_0100_0000_01b3);
    }
    state
}

/// Attaches the offending path to an i/o error; the error kind (and with
/// it the process exit code) is preserved.
pub fn io_with_path(e: std::io::Error, path: &std::path::Path) -> crate::error::D3Error {
    crate::error::D3Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

/// Derives an independent stream seed from a base seed and an index.
/// splitmix64 finalizer; plain xor would leave correlated low bits.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw via Box-Muller.
pub(crate) fn gauss<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > f64::EPSILON {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
