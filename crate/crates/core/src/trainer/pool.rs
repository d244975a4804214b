//! Append-only pool of published policy snapshots.

use std::sync::Arc;

use rand::Rng;

use crate::policy::EntityNet;

/// Every published policy version, in publication order. Snapshots are
/// immutable once published; sampling is uniform over all versions.
#[derive(Debug, Clone, Default)]
pub struct PastPolicyPool {
    snapshots: Vec<Arc<EntityNet>>,
}

impl PastPolicyPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Publishes a deep-copied snapshot; returns its version tag.
    pub fn publish(&mut self, net: &EntityNet) -> u64 {
        self.snapshots.push(Arc::new(net.clone()));
        (self.snapshots.len() - 1) as u64
    }

    /// Registers an already-frozen snapshot (pool reconstruction from disk).
    pub fn push_frozen(&mut self, net: Arc<EntityNet>) -> u64 {
        self.snapshots.push(net);
        (self.snapshots.len() - 1) as u64
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn get(&self, version: u64) -> Arc<EntityNet> {
        Arc::clone(&self.snapshots[version as usize])
    }

    pub fn latest_version(&self) -> Option<u64> {
        self.snapshots.len().checked_sub(1).map(|v| v as u64)
    }

    /// Uniform draw over every published version.
    pub fn sample(&self, rng: &mut impl Rng) -> (u64, Arc<EntityNet>) {
        assert!(!self.snapshots.is_empty(), "pool must hold at least one snapshot");
        let v = rng.gen_range(0..self.snapshots.len());
        (v as u64, Arc::clone(&self.snapshots[v]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::HeadKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> EntityNet {
        EntityNet::init(4, 1, 8, vec![HeadKind::Categorical(2)], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn pool_size_is_publication_count() {
        let mut pool = PastPolicyPool::new();
        let n = net(0);
        for k in 0..5u64 {
            assert_eq!(pool.publish(&n), k);
        }
        assert_eq!(pool.len(), 5);
    }

    #[test]
    fn snapshots_are_immune_to_later_training() {
        let mut pool = PastPolicyPool::new();
        let mut n = net(1);
        pool.publish(&n);
        let before = pool.get(0).params.get("embed1/w").unwrap().data().to_vec();
        n.params.get_mut("embed1/w").unwrap().data_mut().fill(123.0);
        assert_eq!(pool.get(0).params.get("embed1/w").unwrap().data(), &before[..]);
    }

    #[test]
    fn sampling_is_uniform_over_versions() {
        let mut pool = PastPolicyPool::new();
        let n = net(2);
        let versions = 8usize;
        for _ in 0..versions {
            pool.publish(&n);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials = 80_000;
        let mut counts = vec![0usize; versions];
        for _ in 0..trials {
            let (v, _) = pool.sample(&mut rng);
            counts[v as usize] += 1;
        }
        // Chi-squared uniformity, 7 dof, 99% critical value 18.475.
        let expected = trials as f64 / versions as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 18.475, "chi2 {chi2}, counts {counts:?}");
    }
}
