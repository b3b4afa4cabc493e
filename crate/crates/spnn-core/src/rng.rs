//! Deterministic random-number streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! the experiment master seed, with one independent *stream* per logical
//! consumer (trajectory, node, noise channel, network init, ...). ChaCha
//! streams are cryptographically independent counters over the same key, so
//! parallel workers can own disjoint streams and the result never depends on
//! scheduling order.
//!
//! Stream id allocation:
//! - `0`: reserved (never handed out)
//! - `1`: dataset train/test split shuffle
//! - `2`: network parameter initialization
//! - `TRAJECTORY_STREAM_BASE + i`: generator stream for trajectory / node `i`
//! - `NOISE_STREAM_BASE + i`: measurement-noise stream for trajectory `i`

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SPLIT_STREAM: u64 = 1;
pub const INIT_STREAM: u64 = 2;
pub const TRAJECTORY_STREAM_BASE: u64 = 1_000;
pub const NOISE_STREAM_BASE: u64 = 2_000_000;

/// A deterministic generator for the given master seed and stream id.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
