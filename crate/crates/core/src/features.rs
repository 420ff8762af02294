//! Assembles model inputs from the corpus: SID tokens of the short window,
//! the tier feature of the long history, and retrieval over the long history.

use alloc::format;
use alloc::vec::Vec;

use crate::corpus::{Corpus, ExampleRef, ItemId};
use crate::error::{Error, Result};
use crate::model::{ModelInput, TokenVocabulary, TrainExample};
use crate::quantizer::{QuantizerModel, SemanticId};
use crate::search::{build_index, RetrievalIndex, RetrievalPolicy, RetrievedContext};
use crate::sidtier::TierTable;

#[derive(Clone, Copy)]
pub struct FeatureBuilder<'a> {
    pub corpus: &'a Corpus,
    pub quantizer: &'a QuantizerModel,
    pub vocab: &'a TokenVocabulary,
    pub short_len: usize,
    /// Present when the tier token is enabled.
    pub tiers: Option<&'a TierTable>,
    /// Present when semantic hard search is enabled.
    pub retrieval: Option<RetrievalPolicy>,
}

/// Everything needed to decode for one example.
#[derive(Debug, Clone)]
pub struct UserContext<'a> {
    quantizer: &'a QuantizerModel,
    vocab: &'a TokenVocabulary,
    retrieval: Option<RetrievalPolicy>,
    /// Encoder input; `retrieved_tokens` is always empty here.
    pub input: ModelInput,
    pub index: RetrievalIndex,
    pub target: ItemId,
    pub target_tokens: Vec<usize>,
}

impl UserContext<'_> {
    pub fn retrieval_enabled(&self) -> bool {
        self.retrieval.is_some()
    }

    /// Retrieval keyed by first-level code `c0`, with its context tokens.
    /// Empty when retrieval is disabled.
    pub fn retrieve(&self, c0: usize) -> Result<(RetrievedContext, Vec<usize>)> {
        let Some(policy) = self.retrieval else {
            return Ok((RetrievedContext::default(), Vec::new()));
        };
        let ctx = policy.retrieve(&self.index, c0, &self.quantizer.neighbor_dict);
        let tokens = item_tokens(self.quantizer, self.vocab, &ctx.item_ids)?;
        Ok((ctx, tokens))
    }
}

/// Token levels for a quantizer: its three codebooks, plus a suffix level
/// only when some items collide.
pub fn level_sizes(quantizer: &QuantizerModel) -> Vec<usize> {
    let mut sizes = quantizer.sizes().to_vec();
    if quantizer.max_suffix() > 0 {
        sizes.push(quantizer.max_suffix() + 1);
    }
    sizes
}

fn sid_of(quantizer: &QuantizerModel, id: ItemId) -> Result<SemanticId> {
    quantizer
        .sid(id)
        .ok_or_else(|| Error::Data(format!("item {} has no semantic id", id.0)))
}

fn item_tokens(quantizer: &QuantizerModel, vocab: &TokenVocabulary, items: &[ItemId]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(3 * items.len());
    for &id in items {
        out.extend_from_slice(&vocab.item_tokens(&sid_of(quantizer, id)?));
    }
    Ok(out)
}

impl<'a> FeatureBuilder<'a> {
    pub fn user_context(&self, ex: ExampleRef) -> Result<UserContext<'a>> {
        let split = self.corpus.split(ex, self.short_len)?;
        let short_tokens = item_tokens(self.quantizer, self.vocab, &split.short)?;
        let tier_flat = match self.tiers {
            Some(t) => {
                let dense = split
                    .long
                    .iter()
                    .map(|id| self.corpus.dense(*id).ok_or_else(|| Error::Data(format!("unknown item {}", id.0))))
                    .collect::<Result<Vec<_>>>()?;
                Some(t.feature(&dense))
            }
            None => None,
        };
        let index = if self.retrieval.is_some() {
            build_index(&split.long, self.quantizer)?
        } else {
            RetrievalIndex::default()
        };
        let target_tokens = self.vocab.target_tokens(&sid_of(self.quantizer, split.target)?);
        Ok(UserContext {
            quantizer: self.quantizer,
            vocab: self.vocab,
            retrieval: self.retrieval,
            input: ModelInput { short_tokens, tier_flat, retrieved_tokens: Vec::new() },
            index,
            target: split.target,
            target_tokens,
        })
    }

    /// Teacher-forcing example; retrieval is keyed by the true first code,
    /// exactly as decoding keys it by the generated one.
    pub fn train_example(&self, ex: ExampleRef) -> Result<TrainExample> {
        let user = self.user_context(ex)?;
        let c0 = self.vocab.code_of(user.target_tokens[0]).map(|(_, c)| c).unwrap_or(0);
        let (_, retrieved) = user.retrieve(c0)?;
        let mut input = user.input;
        input.retrieved_tokens = retrieved;
        Ok(TrainExample { input, target: user.target_tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{InteractionSequence, Item, UserId};
    use crate::quantizer::fit_full;
    use alloc::vec;

    #[test]
    fn builds_tokens_tiers_and_retrieval() {
        let items: Vec<Item> = (0..8)
            .map(|i| Item { id: ItemId(i), embedding: vec![(i / 4) as f64 * 10.0 + (i % 4) as f64, 1.0] })
            .collect();
        let seq = InteractionSequence { user: UserId(0), items: (0..8).map(ItemId).collect() };
        let (corpus, _) = Corpus::new(items, vec![seq]).unwrap();
        let q = fit_full(&corpus, [2, 2, 2], 20, 1, 1).unwrap();
        let vocab = TokenVocabulary::new(&[2, 2, 2, q.max_suffix() + 1]);
        let tiers = TierTable::new(&q, &corpus, 4).unwrap();
        let fb = FeatureBuilder {
            corpus: &corpus,
            quantizer: &q,
            vocab: &vocab,
            short_len: 2,
            tiers: Some(&tiers),
            retrieval: Some(RetrievalPolicy { cap: 10, augment: false, tau: 1 }),
        };
        let ex = fb.train_example(ExampleRef { seq: 0, pos: 7 }).unwrap();
        assert_eq!(ex.input.short_tokens.len(), 6);
        let flat = ex.input.tier_flat.as_ref().unwrap();
        // Each codeword histogram counts the 5 long items once.
        assert_eq!(flat.iter().sum::<f64>(), 10.0);
        // Items 4..7 share a first code; long history 0..4 holds item 4 only.
        let c0 = q.sid(ItemId(7)).unwrap().first();
        assert_eq!(q.sid(ItemId(4)).unwrap().first(), c0);
        assert_eq!(ex.input.retrieved_tokens, vocab.item_tokens(&q.sid(ItemId(4)).unwrap()).to_vec());
        assert_eq!(ex.target, vocab.target_tokens(&q.sid(ItemId(7)).unwrap()));
    }
}
