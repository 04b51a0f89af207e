//! Keyed random streams.
//!
//! Every stochastic sub-computation draws from a ChaCha stream derived from
//! the run seed, a purpose tag and two integer keys (typically iteration and
//! observation id). Streams are therefore reproducible without carrying RNG
//! state, and independent of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Chain = 1,
    Source = 2,
    Classify = 3,
    Init = 4,
    Synthetic = 5,
}

pub fn stream_rng(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    let mixed = seed ^ (purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream((a << 32) ^ b);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let x: u64 = stream_rng(7, Purpose::Chain, 3, 1).random();
        let y: u64 = stream_rng(7, Purpose::Chain, 3, 1).random();
        let z: u64 = stream_rng(7, Purpose::Chain, 3, 2).random();
        let w: u64 = stream_rng(7, Purpose::Source, 3, 1).random();
        assert_eq!(x, y);
        assert_ne!(x, z);
        assert_ne!(x, w);
    }
}
