//! Synthetic corpora with planted long-term preference structure.
//!
//! Items are drawn around `n_clusters` unit-norm centers. Every user owns a
//! persistent mixture over a few preferred clusters and a fixed set of
//! favorite items inside each. Each interaction is, with probability
//! `long_signal_strength`, a revisit of a favorite from a cluster drawn from
//! the persistent mixture; otherwise it is a uniform item from the current
//! session cluster. Sessions are fixed-length blocks whose cluster is drawn
//! uniformly and independently, so with zero signal strength the long
//! history carries no information about the target cluster.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{Corpus, InteractionSequence, Item, ItemId, UserId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub avg_len: usize,
    pub n_clusters: usize,
    pub long_signal_strength: f64,
    pub seed: u64,
    pub d_emb: usize,
    pub preferred_clusters: usize,
    pub favorites_per_cluster: usize,
    pub session_len: usize,
    /// Expected norm of the per-item offset from its cluster center.
    pub cluster_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 100,
            n_items: 500,
            avg_len: 550,
            n_clusters: 16,
            long_signal_strength: 0.7,
            seed: 7,
            d_emb: 96,
            preferred_clusters: 2,
            favorites_per_cluster: 8,
            session_len: 8,
            cluster_noise: 0.5,
        }
    }
}

/// Generator ground truth, useful for checking what a model recovered.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// Cluster of each item, indexed like [`Corpus::items`].
    pub item_cluster: Vec<usize>,
    /// Per user: preferred clusters with mixture weights.
    pub user_mixture: Vec<Vec<(usize, f64)>>,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    generate_synthetic_with_truth(cfg).map(|(c, _)| c)
}

pub fn generate_synthetic_with_truth(cfg: &SynthConfig) -> Result<(Corpus, SynthTruth)> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_emb;

    let centers: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::tensor::norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect();

    let mut order: Vec<usize> = (0..cfg.n_items).collect();
    order.shuffle(&mut rng);
    let mut item_cluster = alloc::vec![0usize; cfg.n_items];
    for (rank, &item) in order.iter().enumerate() {
        item_cluster[item] = rank % cfg.n_clusters;
    }
    let mut members: Vec<Vec<usize>> = alloc::vec![Vec::new(); cfg.n_clusters];
    for (item, &c) in item_cluster.iter().enumerate() {
        members[c].push(item);
    }

    let sigma = cfg.cluster_noise / libm::sqrt(d as f64);
    let items: Vec<Item> = (0..cfg.n_items)
        .map(|i| {
            let c = &centers[item_cluster[i]];
            let embedding = c
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + sigma * z
                })
                .collect();
            Item { id: ItemId(i as u64), embedding }
        })
        .collect();

    let mut sequences = Vec::with_capacity(cfg.n_users);
    let mut user_mixture = Vec::with_capacity(cfg.n_users);
    let n_pref = cfg.preferred_clusters.min(cfg.n_clusters);
    for u in 0..cfg.n_users {
        let mut clusters: Vec<usize> = (0..cfg.n_clusters).collect();
        clusters.shuffle(&mut rng);
        clusters.truncate(n_pref);
        let raw: Vec<f64> = (0..n_pref).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw.iter().sum();
        let mixture: Vec<(usize, f64)> = clusters.iter().zip(&raw).map(|(&c, &w)| (c, w / total)).collect();
        let favorites: Vec<Vec<usize>> = clusters
            .iter()
            .map(|&c| {
                let mut pool = members[c].clone();
                pool.shuffle(&mut rng);
                pool.truncate(cfg.favorites_per_cluster.min(pool.len()));
                pool
            })
            .collect();

        let lo = libm::round(cfg.avg_len as f64 * 0.8) as usize;
        let hi = libm::round(cfg.avg_len as f64 * 1.2) as usize;
        let len = rng.random_range(lo.max(2)..=hi.max(2));
        let mut seq = Vec::with_capacity(len);
        let mut session_cluster = 0;
        for pos in 0..len {
            if pos % cfg.session_len == 0 {
                session_cluster = rng.random_range(0..cfg.n_clusters);
            }
            let item = if rng.random_bool(cfg.long_signal_strength) {
                let k = pick_weighted(&mut rng, &mixture);
                favorites[k][rng.random_range(0..favorites[k].len())]
            } else {
                let pool = &members[session_cluster];
                pool[rng.random_range(0..pool.len())]
            };
            seq.push(ItemId(item as u64));
        }
        sequences.push(InteractionSequence { user: UserId(u as u64), items: seq });
        user_mixture.push(mixture);
    }

    let (corpus, _) = Corpus::new(items, sequences)?;
    Ok((corpus, SynthTruth { item_cluster, user_mixture }))
}

fn pick_weighted(rng: &mut ChaCha8Rng, mixture: &[(usize, f64)]) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &(_, w)) in mixture.iter().enumerate() {
        acc += w;
        if r < acc {
            return k;
        }
    }
    mixture.len() - 1
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let counts = [
        ("n_users", cfg.n_users),
        ("n_items", cfg.n_items),
        ("avg_len", cfg.avg_len),
        ("n_clusters", cfg.n_clusters),
        ("d_emb", cfg.d_emb),
        ("preferred_clusters", cfg.preferred_clusters),
        ("favorites_per_cluster", cfg.favorites_per_cluster),
        ("session_len", cfg.session_len),
    ];
    for (name, v) in counts {
        if v == 0 {
            return Err(Error::Parameter(alloc::format!("{name} must be positive")));
        }
    }
    if cfg.n_clusters > cfg.n_items {
        return Err(Error::Parameter(alloc::format!(
            "n_clusters ({}) exceeds n_items ({})",
            cfg.n_clusters,
            cfg.n_items
        )));
    }
    if !(0.0..=1.0).contains(&cfg.long_signal_strength) {
        return Err(Error::Parameter("long_signal_strength must lie in [0, 1]".into()));
    }
    if !(cfg.cluster_noise >= 0.0 && cfg.cluster_noise.is_finite()) {
        return Err(Error::Parameter("cluster_noise must be finite and non-negative".into()));
    }
    Ok(())
}
