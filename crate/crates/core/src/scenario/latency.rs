//! Seeded model of how long a deployment takes to be mined. Samples feed
//! reports only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DeployKind {
    DataShare,
    Congress,
}

impl DeployKind {
    /// Closed range of modeled mining time in seconds.
    pub fn range(self) -> (f64, f64) {
        match self {
            DeployKind::DataShare => (20.0, 50.0),
            DeployKind::Congress => (25.0, 40.0),
        }
    }
}

impl std::str::FromStr for DeployKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "datashare" => Ok(DeployKind::DataShare),
            "congress" => Ok(DeployKind::Congress),
            other => Err(format!("unknown kind {other:?} (expected datashare or congress)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatencyModel {
    rng: ChaCha20Rng,
}

impl LatencyModel {
    pub fn new(seed: u64) -> Self {
        LatencyModel { rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    pub fn from_rng(rng: ChaCha20Rng) -> Self {
        LatencyModel { rng }
    }

    pub fn sample(&mut self, kind: DeployKind) -> f64 {
        let (lo, hi) = kind.range();
        self.rng.gen_range(lo..=hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_stay_in_range_and_repeat() {
        let mut a = LatencyModel::new(3);
        let mut b = LatencyModel::new(3);
        for kind in [DeployKind::DataShare, DeployKind::Congress] {
            let (lo, hi) = kind.range();
            for _ in 0..200 {
                let x = a.sample(kind);
                assert!((lo..=hi).contains(&x));
                assert_eq!(x.to_bits(), b.sample(kind).to_bits());
            }
        }
    }
}
