//! Seed derivation.
//!
//! Every random stream in a run is keyed by `(master seed, stream tag,
//! index...)`, so switching a component off never shifts the draws seen by
//! the others. This is what makes the FedAvg degeneration and the sweep
//! comparisons line up sample for sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Values are arbitrary but fixed forever; changing one changes
/// every recorded experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 0x01,
    Split = 0x02,
    Partition = 0x03,
    ModelInit = 0x04,
    GeneratorInit = 0x05,
    Sampling = 0x10,
    LocalTraining = 0x11,
    GeneratorTraining = 0x12,
    Synthesis = 0x13,
    Analysis = 0x20,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed, a stream tag and any number of indices into a seed.
pub fn derive(master: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix(master ^ splitmix(stream as u64));
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    h
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, indices: &[u64]) -> Rng {
    rng(derive(master, stream, indices))
}
