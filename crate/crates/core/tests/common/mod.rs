#![allow(dead_code)]

use glass_core::corpus::{Corpus, InteractionSequence, Item, ItemId, UserId};
use glass_core::decode::PrefixTrie;
use glass_core::features::{level_sizes, FeatureBuilder};
use glass_core::model::{ModelConfig, TokenVocabulary};
use glass_core::quantizer::{fit_full, QuantizerModel};
use glass_core::search::RetrievalPolicy;
use glass_core::sidtier::TierTable;
use glass_core::synth::{generate_synthetic, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gaussian item embeddings and random histories.
pub fn random_corpus(seed: u64, n_items: usize, d: usize, n_users: usize, len: usize) -> Corpus {
    let mut r = rng(seed);
    let items = (0..n_items).map(|i| Item { id: ItemId(i as u64), embedding: gaussian(&mut r, d) }).collect();
    let seqs = (0..n_users)
        .map(|u| InteractionSequence {
            user: UserId(u as u64),
            items: (0..len).map(|_| ItemId(r.random_range(0..n_items) as u64)).collect(),
        })
        .collect();
    Corpus::new(items, seqs).unwrap().0
}

pub fn synth_corpus(n_users: usize, n_items: usize, avg_len: usize, seed: u64) -> Corpus {
    generate_synthetic(&SynthConfig {
        n_users,
        n_items,
        avg_len,
        n_clusters: 8,
        d_emb: 16,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub struct Setup {
    pub corpus: Corpus,
    pub quantizer: QuantizerModel,
    pub vocab: TokenVocabulary,
    pub tiers: TierTable,
    pub trie: PrefixTrie,
}

impl Setup {
    pub fn new(corpus: Corpus, sizes: [usize; 3], seed: u64) -> Self {
        let quantizer = fit_full(&corpus, sizes, 20, seed, 2).unwrap();
        let vocab = TokenVocabulary::new(&level_sizes(&quantizer));
        let tiers = TierTable::new(&quantizer, &corpus, 4).unwrap();
        let trie = PrefixTrie::from_quantizer(&quantizer, &vocab).unwrap();
        Setup { corpus, quantizer, vocab, tiers, trie }
    }

    pub fn builder(&self, short_len: usize, full: bool) -> FeatureBuilder<'_> {
        FeatureBuilder {
            corpus: &self.corpus,
            quantizer: &self.quantizer,
            vocab: &self.vocab,
            short_len,
            tiers: full.then_some(&self.tiers),
            retrieval: full.then_some(RetrievalPolicy { cap: 16, augment: true, tau: 4 }),
        }
    }

    pub fn model_config(&self, short_len: usize, full: bool) -> ModelConfig {
        ModelConfig {
            level_sizes: level_sizes(&self.quantizer),
            d: 8,
            heads: 2,
            kv_dim: 4,
            ffn_dim: 16,
            enc_blocks: 1,
            dec_blocks: 2,
            short_len,
            tier_bins: 4,
            tier_hidden: 8,
            tier_log1p: true,
            sidtier: full,
            shs: full,
            dropout: 0.0,
        }
    }
}
