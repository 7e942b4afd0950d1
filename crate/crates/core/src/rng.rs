//! Counter-based random substreams.
//!
//! Every consumer of randomness names its stream by a `(domain, a, b)` triple,
//! e.g. `(Batch, ndt, round)`. The master seed fixes the ChaCha key and the
//! triple selects the ChaCha stream, so a stream's output never depends on how
//! many other streams were opened before it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    ModelInit,
    Batch,
    BaseMean,
    RegionalFlow,
    RegionalSpeed,
    IdioFlow,
    IdioSpeed,
    Perturb,
    Lipschitz,
    Permutation,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::ModelInit => 0x01,
            Domain::Batch => 0x02,
            Domain::BaseMean => 0x03,
            Domain::RegionalFlow => 0x04,
            Domain::RegionalSpeed => 0x05,
            Domain::IdioFlow => 0x06,
            Domain::IdioSpeed => 0x07,
            Domain::Perturb => 0x08,
            Domain::Lipschitz => 0x09,
            Domain::Permutation => 0x0a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub domain: Domain,
    pub a: u64,
    pub b: u64,
}

impl StreamId {
    pub fn new(domain: Domain, a: u64, b: u64) -> Self {
        Self { domain, a, b }
    }

    fn stream_number(&self) -> u64 {
        splitmix64(
            self.domain.tag()
                ^ splitmix64(self.a ^ splitmix64(self.b.wrapping_add(0x632b_e59b_d9b4_e019))),
        )
    }
}

/// Root of all substreams for one simulation seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTree {
    pub seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, id: StreamId) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id.stream_number());
        rng.set_word_pos(0);
        rng
    }

    pub fn batch_stream(&self, ndt: usize, round: u64) -> ChaCha8Rng {
        self.stream(StreamId::new(Domain::Batch, ndt as u64, round))
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
