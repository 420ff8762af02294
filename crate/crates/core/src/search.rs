//! Semantic hard search over a user's long history, keyed by first-level
//! codeword, with neighbor augmentation for sparse buckets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::quantizer::QuantizerModel;

/// Per-user postings: first-level codeword → ascending positions in the long history.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RetrievalIndex {
    items: Vec<ItemId>,
    postings: BTreeMap<usize, Vec<usize>>,
}

impl RetrievalIndex {
    /// Builds postings from the first-level code of each history item.
    pub fn from_codes(items: &[ItemId], first_codes: &[usize]) -> Self {
        debug_assert_eq!(items.len(), first_codes.len());
        let mut postings: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, &a) in first_codes.iter().enumerate() {
            postings.entry(a).or_default().push(pos);
        }
        RetrievalIndex { items: items.to_vec(), postings }
    }

    pub fn postings(&self, codeword: usize) -> &[usize] {
        self.postings.get(&codeword).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn codewords(&self) -> impl Iterator<Item = usize> + '_ {
        self.postings.keys().copied()
    }

    pub fn history(&self) -> &[ItemId] {
        &self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn build_index(long_history: &[ItemId], quantizer: &QuantizerModel) -> Result<RetrievalIndex> {
    let codes = long_history
        .iter()
        .map(|id| {
            quantizer
                .sid(*id)
                .map(|s| s.first())
                .ok_or_else(|| Error::Data(format!("history item {} has no semantic id", id.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalIndex::from_codes(long_history, &codes))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RetrievedContext {
    /// Long-history positions, ascending.
    pub positions: Vec<usize>,
    pub item_ids: Vec<ItemId>,
    pub source_codewords: Vec<usize>,
    pub augmented: bool,
}

impl RetrievedContext {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn from_positions(index: &RetrievalIndex, mut positions: Vec<usize>, sources: Vec<usize>, augmented: bool, cap: usize) -> Self {
        if positions.len() > cap {
            positions.drain(..positions.len() - cap);
        }
        let item_ids = positions.iter().map(|&p| index.items[p]).collect();
        RetrievedContext { positions, item_ids, source_codewords: sources, augmented }
    }
}

/// History items sharing `sid1`, chronological, keeping the most recent `cap`.
pub fn hard_search(index: &RetrievalIndex, sid1: usize, cap: usize) -> RetrievedContext {
    let positions = index.postings(sid1).to_vec();
    let sources = if positions.is_empty() { Vec::new() } else { alloc::vec![sid1] };
    RetrievedContext::from_positions(index, positions, sources, false, cap)
}

/// When fewer than `tau` items were retrieved, merges whole neighbor buckets
/// in neighbor order until at least `tau` items are held or neighbors run out.
pub fn augment_if_sparse(
    context: RetrievedContext,
    sid1: usize,
    neighbors: &[usize],
    index: &RetrievalIndex,
    tau: usize,
    cap: usize,
) -> RetrievedContext {
    if context.len() >= tau {
        return context;
    }
    let mut positions = context.positions;
    let mut sources = context.source_codewords;
    for &nb in neighbors {
        if positions.len() >= tau {
            break;
        }
        if nb == sid1 {
            continue;
        }
        let extra = index.postings(nb);
        if !extra.is_empty() {
            positions.extend_from_slice(extra);
            sources.push(nb);
        }
    }
    positions.sort_unstable();
    positions.dedup();
    RetrievedContext::from_positions(index, positions, sources, true, cap)
}

/// How retrieval contexts are assembled during training and decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalPolicy {
    pub cap: usize,
    pub augment: bool,
    pub tau: usize,
}

impl RetrievalPolicy {
    pub fn retrieve(&self, index: &RetrievalIndex, sid1: usize, neighbor_dict: &BTreeMap<usize, Vec<usize>>) -> RetrievedContext {
        let ctx = hard_search(index, sid1, self.cap);
        if !self.augment {
            return ctx;
        }
        let neighbors = neighbor_dict.get(&sid1).map(Vec::as_slice).unwrap_or(&[]);
        augment_if_sparse(ctx, sid1, neighbors, index, self.tau, self.cap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn index(codes: &[usize]) -> RetrievalIndex {
        let items: Vec<ItemId> = (0..codes.len() as u64).map(|i| ItemId(100 + i)).collect();
        RetrievalIndex::from_codes(&items, codes)
    }

    #[test]
    fn direct_construction() {
        assert!(index(&[]).postings(0).is_empty());
        let idx = index(&[5, 5, 9]);
        assert_eq!(idx.postings(5), &[0, 1]);
        assert_eq!(idx.postings(9), &[2]);
        assert_eq!(idx.codewords().collect::<Vec<_>>(), vec![5, 9]);
    }

    #[test]
    fn hard_search_filters_and_caps_most_recent() {
        let idx = index(&[1, 2, 1, 1, 3, 1]);
        let ctx = hard_search(&idx, 1, 10);
        assert_eq!(ctx.positions, vec![0, 2, 3, 5]);
        assert_eq!(ctx.item_ids, vec![ItemId(100), ItemId(102), ItemId(103), ItemId(105)]);
        assert!(!ctx.augmented);
        assert_eq!(hard_search(&idx, 1, 2).positions, vec![3, 5]);
        assert!(hard_search(&idx, 7, 10).is_empty());
    }

    #[test]
    fn augmentation_threshold_is_strict() {
        let idx = index(&[1, 2, 1, 2, 2]);
        let ctx = hard_search(&idx, 1, 10);
        let same = augment_if_sparse(ctx.clone(), 1, &[2], &idx, 2, 10);
        assert_eq!(same, ctx);
        assert!(!same.augmented);
    }

    #[test]
    fn empty_context_merges_a_single_neighbor() {
        let idx = index(&[4, 4, 4]);
        let ctx = hard_search(&idx, 0, 10);
        let out = augment_if_sparse(ctx, 0, &[4, 7], &idx, 2, 10);
        assert_eq!(out.positions, vec![0, 1, 2]);
        assert!(out.augmented);
        assert_eq!(out.source_codewords, vec![4]);
    }

    #[test]
    fn whole_neighbors_are_consumed_in_rank_order() {
        let idx = index(&[3, 1, 2, 3, 2, 5]);
        let ctx = hard_search(&idx, 1, 10);
        let out = augment_if_sparse(ctx, 1, &[2, 3, 5], &idx, 3, 10);
        // 1 item, then neighbor 2 adds two -> 3 >= tau, stop before 3.
        assert_eq!(out.positions, vec![1, 2, 4]);
        assert_eq!(out.source_codewords, vec![1, 2]);
    }
}
