//! Counter-based random streams.
//!
//! A stream is fully identified by `(seed, stream_id, counter)`, so any draw
//! sequence — dropout masks in particular — can be replayed per (step, layer,
//! site) without ever being stored. ChaCha is used underneath because its
//! output is specified bit-for-bit across platforms and it supports cheap
//! stream selection and seeking.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A replayable random stream: identical `(seed, stream_id)` always yields
/// the identical draw sequence; distinct stream ids are independent.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self::at(seed, stream_id, 0)
    }

    /// Reconstruct a stream at a given draw counter.
    pub fn at(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        // One u64 draw consumes two 32-bit words.
        rng.set_word_pos(counter as u128 * 2);
        RngStream { seed, stream_id, counter, rng }
    }

    /// Derive an independent stream from this one; the tag namespaces sites
    /// (per step, per layer, per sentence) without shared state.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream_id ^ splitmix64(tag)))
    }

    pub fn state(&self) -> (u64, u64, u64) {
        (self.seed, self.stream_id, self.counter)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; consumes exactly two draws, which keeps
    /// the counter deterministic (no rejection loop).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Bernoulli draw with success probability `p`.
    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }
}
