//! Counter-based seeding.
//!
//! Every random quantity is drawn from a stream identified by
//! `(root seed, label, index)`, so results never depend on the order in
//! which parallel workers pick up their tasks.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derive the seed of a labeled substream.
pub fn substream_seed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ label_hash(label)) ^ splitmix64(index.wrapping_add(1)))
}

pub fn substream(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, label, index))
}

/// Distribution of trace-estimator probe vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    #[default]
    Rademacher,
    Gaussian,
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn probe(rng: &mut impl Rng, n: usize, kind: ProbeKind) -> DVector<f64> {
    match kind {
        ProbeKind::Gaussian => standard_normal(rng, n),
        ProbeKind::Rademacher => {
            DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
        }
    }
}
