//! Items, interaction sequences and the leave-one-out example protocol.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: ItemId,
    pub embedding: Vec<f64>,
}

/// One user's chronologically ordered interactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user: UserId,
    pub items: Vec<ItemId>,
}

/// History split around a prediction target: `long ++ short ++ [target]`
/// reproduces the input exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSequence {
    pub long: Vec<ItemId>,
    pub short: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Partition {
    Train,
    Validation,
    Test,
}

/// A prediction example: the item at `pos` of sequence `seq`, with
/// everything before it as history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExampleRef {
    pub seq: usize,
    pub pos: usize,
}

/// Splits `items` (history followed by the target) into long, short and target.
pub fn split_sequence(items: &[ItemId], short_len: usize) -> Result<SplitSequence> {
    if items.len() < 2 {
        return Err(Error::TooShort { len: items.len() });
    }
    if short_len == 0 {
        return Err(Error::Parameter("short_len must be at least 1".into()));
    }
    let (history, target) = items.split_at(items.len() - 1);
    let n_short = short_len.min(history.len());
    let (long, short) = history.split_at(history.len() - n_short);
    Ok(SplitSequence { long: long.to_vec(), short: short.to_vec(), target: target[0] })
}

/// Leave-one-out label of the example predicting position `pos` of a
/// sequence of length `len`. Position 0 has no history and is not an example.
pub fn partition_of(len: usize, pos: usize) -> Option<Partition> {
    if pos == 0 || pos >= len {
        None
    } else if pos == len - 1 {
        Some(Partition::Test)
    } else if pos == len - 2 {
        Some(Partition::Validation)
    } else {
        Some(Partition::Train)
    }
}

/// Immutable catalog plus interaction log.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    items: Vec<Item>,
    index: BTreeMap<ItemId, usize>,
    sequences: Vec<InteractionSequence>,
    d_emb: usize,
}

/// What [`Corpus::new`] discarded while enforcing invariants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DropReport {
    pub unresolved: usize,
    pub too_short: usize,
}

impl Corpus {
    /// Validates items and keeps only sequences whose items all resolve and
    /// which hold at least two interactions.
    pub fn new(mut items: Vec<Item>, sequences: Vec<InteractionSequence>) -> Result<(Self, DropReport)> {
        let d_emb = items.first().map(|i| i.embedding.len()).unwrap_or(0);
        items.sort_by_key(|i| i.id);
        let mut index = BTreeMap::new();
        for (k, item) in items.iter().enumerate() {
            if item.embedding.len() != d_emb {
                return Err(Error::Format(format!(
                    "item {} has embedding width {}, expected {d_emb}",
                    item.id.0,
                    item.embedding.len()
                )));
            }
            if item.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("item {} has a non-finite embedding", item.id.0)));
            }
            if index.insert(item.id, k).is_some() {
                return Err(Error::Data(format!("duplicate item id {}", item.id.0)));
            }
        }
        let mut report = DropReport::default();
        let mut kept = Vec::with_capacity(sequences.len());
        for seq in sequences {
            if !seq.items.iter().all(|i| index.contains_key(i)) {
                report.unresolved += 1;
            } else if seq.items.len() < 2 {
                report.too_short += 1;
            } else {
                kept.push(seq);
            }
        }
        if kept.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok((Corpus { items, index, sequences: kept, d_emb }, report))
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    /// Items sorted by id.
    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn sequences(&self) -> &[InteractionSequence] {
        &self.sequences
    }

    /// Dense position of an item in [`Corpus::items`].
    pub fn dense(&self, id: ItemId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn item(&self, id: ItemId) -> Option<&Item> {
        self.dense(id).map(|k| &self.items[k])
    }

    pub fn examples(&self, partition: Partition) -> impl Iterator<Item = ExampleRef> + '_ {
        self.sequences.iter().enumerate().flat_map(move |(s, seq)| {
            let len = seq.items.len();
            (1..len)
                .filter(move |&p| partition_of(len, p) == Some(partition))
                .map(move |pos| ExampleRef { seq: s, pos })
        })
    }

    pub fn split(&self, ex: ExampleRef, short_len: usize) -> Result<SplitSequence> {
        let items = &self.sequences[ex.seq].items;
        split_sequence(&items[..=ex.pos], short_len)
    }

    /// Mean number of interactions per sequence.
    pub fn mean_sequence_len(&self) -> f64 {
        let total: usize = self.sequences.iter().map(|s| s.items.len()).sum();
        total as f64 / self.sequences.len() as f64
    }
}
