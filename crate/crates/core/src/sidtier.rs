//! Long-history interest histograms against first-level codeword prototypes.
//!
//! For every first-level codeword the cosine similarities between its
//! prototype and each long-history item are bucketed into `N` equal-width
//! tiers over `[-1, 1]`. The per-codeword histograms are concatenated in
//! codeword order to form the flat tier feature; the projection into token
//! space lives with the model parameters.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{Corpus, ItemId};
use crate::error::{Error, Result};
use crate::quantizer::QuantizerModel;
use crate::tensor::{dot, norm};

/// Histogram of one codeword's similarities over the tiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierVector {
    pub counts: Vec<u32>,
}

/// Flat tier feature and, once projected, its token-space embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TierFeature {
    pub flat: Vec<f64>,
    pub projected: Option<Vec<f64>>,
}

/// Cosine of `prototype` against every history embedding, in history order.
/// Zero-norm history embeddings score 0.
pub fn similarity_set(prototype: &[f64], history: &[&[f64]]) -> Result<Vec<f64>> {
    let pn = norm(prototype);
    if pn == 0.0 {
        return Err(Error::Numeric("prototype has zero norm".into()));
    }
    history
        .iter()
        .map(|h| {
            if h.len() != prototype.len() {
                return Err(Error::Data(format!(
                    "history embedding has dimension {}, prototype has {}",
                    h.len(),
                    prototype.len()
                )));
            }
            let hn = norm(h);
            Ok(if hn == 0.0 { 0.0 } else { dot(prototype, h) / (pn * hn) })
        })
        .collect()
}

/// Tier of a similarity: bin `i` covers `[-1 + 2i/N, -1 + 2(i+1)/N)`, the
/// last bin is closed at 1, and slightly out-of-range values are clamped.
pub fn tier_of(s: f64, n: usize) -> usize {
    let raw = libm::floor((s + 1.0) * n as f64 / 2.0);
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(n - 1)
    }
}

pub fn tier_histogram(similarities: &[f64], n: usize) -> Result<TierVector> {
    if n == 0 {
        return Err(Error::Parameter("tier count N must be at least 1".into()));
    }
    let mut counts = vec![0u32; n];
    for &s in similarities {
        counts[tier_of(s, n)] += 1;
    }
    Ok(TierVector { counts })
}

/// Concatenated tier histograms of `long` for codewords `0..K_0`.
/// Codewords without a prototype contribute zeros.
pub fn build_tier_feature(
    long: &[ItemId],
    quantizer: &QuantizerModel,
    corpus: &Corpus,
    n: usize,
) -> Result<TierFeature> {
    let k0 = quantizer.codebooks[0].size();
    let history: Vec<&[f64]> = long
        .iter()
        .map(|id| {
            corpus
                .item(*id)
                .map(|i| i.embedding.as_slice())
                .ok_or_else(|| Error::Data(format!("history item {} is not in the corpus", id.0)))
        })
        .collect::<Result<_>>()?;
    let mut flat = Vec::with_capacity(k0 * n);
    for a in 0..k0 {
        match quantizer.prototypes.get(&a) {
            Some(proto) => {
                let sims = similarity_set(proto, &history)?;
                flat.extend(tier_histogram(&sims, n)?.counts.iter().map(|&c| c as f64));
            }
            None => {
                if n == 0 {
                    return Err(Error::Parameter("tier count N must be at least 1".into()));
                }
                flat.extend(core::iter::repeat_n(0.0, n));
            }
        }
    }
    Ok(TierFeature { flat, projected: None })
}

/// Precomputed tier index of every corpus item against every prototype, so
/// per-example features reduce to counting.
#[derive(Debug, Clone)]
pub struct TierTable {
    k0: usize,
    n: usize,
    /// `tiers[item * k0 + a]`, or `u16::MAX` when codeword `a` has no prototype.
    tiers: Vec<u16>,
}

impl TierTable {
    pub fn new(quantizer: &QuantizerModel, corpus: &Corpus, n: usize) -> Result<Self> {
        if n == 0 || n >= u16::MAX as usize {
            return Err(Error::Parameter(format!("tier count {n} out of range")));
        }
        let k0 = quantizer.codebooks[0].size();
        let protos: BTreeMap<usize, (&Vec<f64>, f64)> = quantizer
            .prototypes
            .iter()
            .map(|(&a, p)| (a, (p, norm(p))))
            .collect();
        if let Some((a, _)) = protos.iter().find(|(_, (_, pn))| *pn == 0.0) {
            return Err(Error::Numeric(format!("prototype {a} has zero norm")));
        }
        let mut tiers = vec![u16::MAX; corpus.items().len() * k0];
        for (i, item) in corpus.items().iter().enumerate() {
            let hn = norm(&item.embedding);
            for (&a, &(p, pn)) in &protos {
                let s = if hn == 0.0 { 0.0 } else { dot(p, &item.embedding) / (pn * hn) };
                tiers[i * k0 + a] = tier_of(s, n) as u16;
            }
        }
        Ok(TierTable { k0, n, tiers })
    }

    pub fn len(&self) -> usize {
        self.k0 * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat feature for a long history given as dense corpus indices.
    pub fn feature(&self, long_dense: &[usize]) -> Vec<f64> {
        let mut flat = vec![0.0; self.k0 * self.n];
        for &i in long_dense {
            for a in 0..self.k0 {
                let t = self.tiers[i * self.k0 + a];
                if t != u16::MAX {
                    flat[a * self.n + t as usize] += 1.0;
                }
            }
        }
        flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_orthogonal_similarities() {
        let p = [1.0, 2.0, 0.0];
        let s = similarity_set(&p, &[&[1.0, 2.0, 0.0], &[-2.0, 1.0, 5.0], &[0.0, 0.0, 0.0]]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        assert_eq!(s[2], 0.0);
        assert!(matches!(similarity_set(&[0.0, 0.0], &[]), Err(Error::Numeric(_))));
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(tier_histogram(&[], 4).unwrap().counts, vec![0, 0, 0, 0]);
        assert_eq!(tier_histogram(&[-0.5, 0.5, 1.0], 2).unwrap().counts, vec![1, 2]);
        assert_eq!(tier_histogram(&[-1.0, 0.0, -1.0 - 1e-12, 1.0 + 1e-12], 2).unwrap().counts, vec![2, 2]);
        assert!(matches!(tier_histogram(&[0.1], 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn tiers_are_half_open_intervals() {
        // N = 4: boundaries at -1, -0.5, 0, 0.5, 1
        assert_eq!(tier_of(-0.5, 4), 1);
        assert_eq!(tier_of(-0.500001, 4), 0);
        assert_eq!(tier_of(0.0, 4), 2);
        assert_eq!(tier_of(0.4999, 4), 2);
        assert_eq!(tier_of(1.0, 4), 3);
    }
}
