//! Seeded randomness. All generators are PCG-64 (XSL-RR 128/64 LCG) so that a
//! seed fully determines every stream.

use rand::SeedableRng;
use rand_pcg::Pcg64;

pub type SeededRng = Pcg64;

pub fn seeded(seed: u64) -> SeededRng {
    Pcg64::seed_from_u64(seed)
}

/// Independent stream `index` under `seed`, for per-item generation that must
/// not depend on processing order.
pub fn stream(seed: u64, index: u64) -> SeededRng {
    let state = (u128::from(seed) << 64) | u128::from(seed ^ 0x9e37_79b9_7f4a_7c15);
    Pcg64::new(state, u128::from(index))
}
