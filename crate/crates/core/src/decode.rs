//! Trie-constrained beam search over SID tokens. After the first level each
//! surviving beam retrieves with its own first code and keeps that context
//! for the remaining levels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::features::UserContext;
use crate::model::{ModelParams, TokenVocabulary};
use crate::quantizer::QuantizerModel;
use crate::search::RetrievedContext;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    item: Option<ItemId>,
}

/// Tree of the token paths of all catalog items; leaves carry item ids.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
    depth: usize,
    items: usize,
}

impl PrefixTrie {
    pub fn new(paths: impl IntoIterator<Item = (ItemId, Vec<usize>)>) -> Result<Self> {
        let mut trie = PrefixTrie { nodes: vec![TrieNode::default()], depth: 0, items: 0 };
        for (item, path) in paths {
            if trie.items == 0 {
                trie.depth = path.len();
            } else if path.len() != trie.depth {
                return Err(Error::Catalog(format!("item {} has a path of length {}, expected {}", item.0, path.len(), trie.depth)));
            }
            let mut node = 0;
            for &t in &path {
                node = match trie.nodes[node].children.get(&t) {
                    Some(&n) => n,
                    None => {
                        trie.nodes.push(TrieNode::default());
                        let n = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(t, n);
                        n
                    }
                };
            }
            if let Some(other) = trie.nodes[node].item {
                return Err(Error::Catalog(format!("items {} and {} share a token path", other.0, item.0)));
            }
            trie.nodes[node].item = Some(item);
            trie.items += 1;
        }
        Ok(trie)
    }

    pub fn from_quantizer(quantizer: &QuantizerModel, vocab: &TokenVocabulary) -> Result<Self> {
        PrefixTrie::new(quantizer.assignments.iter().map(|(&id, sid)| (id, vocab.target_tokens(sid))))
    }

    fn node(&self, prefix: &[usize]) -> Option<usize> {
        let mut node = 0;
        for t in prefix {
            node = *self.nodes[node].children.get(t)?;
        }
        Some(node)
    }

    /// Valid next tokens after `prefix`, ascending.
    pub fn children(&self, prefix: &[usize]) -> Vec<usize> {
        self.node(prefix).map(|n| self.nodes[n].children.keys().copied().collect()).unwrap_or_default()
    }

    pub fn item(&self, path: &[usize]) -> Option<ItemId> {
        self.node(path).and_then(|n| self.nodes[n].item)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.items
    }

    pub fn is_empty(&self) -> bool {
        self.items == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamCandidate {
    /// Generated tokens, without BOS.
    pub prefix: Vec<usize>,
    pub cum_logprob: f64,
    pub context: RetrievedContext,
}

/// Gate reading for one beam at one decoding step after the first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSample {
    pub level: usize,
    pub retrieved_length: usize,
    pub mean_gate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeamTrace {
    /// Surviving prefixes per depth in rank order, with cumulative log-probs.
    pub depths: Vec<Vec<(Vec<usize>, f64)>>,
    pub gates: Vec<GateSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub item: ItemId,
    pub path: Vec<usize>,
    pub cum_logprob: f64,
}

/// Log-softmax of `logits` restricted to its finite entries.
pub fn level_log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().filter(|x| x.is_finite()).map(|x| libm::exp(x - m)).sum();
    let lse = m + libm::log(s);
    logits.iter().map(|&x| if x.is_finite() { x - lse } else { f64::NEG_INFINITY }).collect()
}

/// Higher cumulative log-prob first, then ascending token ids.
fn rank_order(a: (&[usize], f64), b: (&[usize], f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

struct Beam {
    prefix: Vec<usize>,
    cum: f64,
    ctx: usize,
}

/// Ranked items (at most `beam_k`) and the per-depth trace.
pub fn beam_search(
    model: &ModelParams,
    user: &UserContext<'_>,
    trie: &PrefixTrie,
    beam_k: usize,
) -> Result<(Vec<Ranked>, BeamTrace)> {
    if trie.is_empty() {
        return Err(Error::Catalog("no items to decode".into()));
    }
    if beam_k == 0 {
        return Err(Error::Parameter("beam width must be at least 1".into()));
    }
    if trie.depth() != model.config().levels() {
        return Err(Error::Config(format!(
            "catalog paths have {} levels, model decodes {}",
            trie.depth(),
            model.config().levels()
        )));
    }
    let bos = model.vocab().bos();
    let enc: Tensor = model.encode_user(&user.input)?;
    let mut contexts: Vec<(RetrievedContext, Vec<usize>)> = vec![(RetrievedContext::default(), Vec::new())];
    let mut by_code: BTreeMap<usize, usize> = BTreeMap::new();
    let mut beams = vec![Beam { prefix: Vec::new(), cum: 0.0, ctx: 0 }];
    let mut trace = BeamTrace::default();

    for level in 0..trie.depth() {
        let mut expanded: Vec<(Vec<usize>, f64, usize)> = Vec::new();
        for beam in &beams {
            let mut input = vec![bos];
            input.extend_from_slice(&beam.prefix);
            let (ctx, tokens) = &contexts[beam.ctx];
            let step = model.decode_step(&enc, &input, tokens)?;
            if level > 0 {
                trace.gates.push(GateSample { level, retrieved_length: ctx.len(), mean_gate: step.mean_gate });
            }
            let lp = level_log_softmax(&step.logits);
            for t in trie.children(&beam.prefix) {
                let mut p = beam.prefix.clone();
                p.push(t);
                expanded.push((p, beam.cum + lp[t], beam.ctx));
            }
        }
        expanded.sort_by(|a, b| rank_order((&a.0, a.1), (&b.0, b.1)));
        expanded.truncate(beam_k);
        beams = Vec::with_capacity(expanded.len());
        for (prefix, cum, mut ctx) in expanded {
            if level == 0 {
                let c0 = model.vocab().code_of(prefix[0]).map(|(_, c)| c).unwrap_or(0);
                ctx = match by_code.get(&c0) {
                    Some(&i) => i,
                    None => {
                        contexts.push(user.retrieve(c0)?);
                        by_code.insert(c0, contexts.len() - 1);
                        contexts.len() - 1
                    }
                };
            }
            beams.push(Beam { prefix, cum, ctx });
        }
        trace.depths.push(beams.iter().map(|b| (b.prefix.clone(), b.cum)).collect());
    }

    let ranked = beams
        .into_iter()
        .map(|b| {
            let item = trie.item(&b.prefix).ok_or_else(|| Error::Catalog("beam ended off the catalog".into()))?;
            Ok(Ranked { item, path: b.prefix, cum_logprob: b.cum })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ranked, trace))
}

/// Surviving beams with their retrieval contexts after a full search.
pub fn beam_candidates(
    model: &ModelParams,
    user: &UserContext<'_>,
    trie: &PrefixTrie,
    beam_k: usize,
) -> Result<Vec<BeamCandidate>> {
    let (ranked, _) = beam_search(model, user, trie, beam_k)?;
    ranked
        .into_iter()
        .map(|r| {
            let c0 = model.vocab().code_of(r.path[0]).map(|(_, c)| c).unwrap_or(0);
            let (context, _) = user.retrieve(c0)?;
            Ok(BeamCandidate { prefix: r.path, cum_logprob: r.cum_logprob, context })
        })
        .collect()
}

/// Argmax over trie-valid children at every step, smallest token on ties.
pub fn greedy_decode(model: &ModelParams, user: &UserContext<'_>, trie: &PrefixTrie) -> Result<Ranked> {
    if trie.is_empty() {
        return Err(Error::Catalog("no items to decode".into()));
    }
    let enc = model.encode_user(&user.input)?;
    let mut path = Vec::new();
    let mut retrieved = Vec::new();
    let mut cum = 0.0;
    for level in 0..trie.depth() {
        let mut input = vec![model.vocab().bos()];
        input.extend_from_slice(&path);
        let step = model.decode_step(&enc, &input, &retrieved)?;
        let lp = level_log_softmax(&step.logits);
        let mut best: Option<usize> = None;
        for t in trie.children(&path) {
            if best.is_none_or(|b| lp[t] > lp[b]) {
                best = Some(t);
            }
        }
        let t = best.ok_or_else(|| Error::Catalog("dead end in catalog trie".into()))?;
        cum += lp[t];
        path.push(t);
        if level == 0 {
            let c0 = model.vocab().code_of(t).map(|(_, c)| c).unwrap_or(0);
            retrieved = user.retrieve(c0)?.1;
        }
    }
    let item = trie.item(&path).ok_or_else(|| Error::Catalog("greedy path is not an item".into()))?;
    Ok(Ranked { item, path, cum_logprob: cum })
}

/// Top `k_max` distinct items from a beam of width `beam_k`.
pub fn rank_for_eval(
    model: &ModelParams,
    user: &UserContext<'_>,
    trie: &PrefixTrie,
    beam_k: usize,
    k_max: usize,
) -> Result<(Vec<ItemId>, BeamTrace)> {
    if beam_k < k_max {
        return Err(Error::Parameter(format!("beam width {beam_k} is below the ranking depth {k_max}")));
    }
    let (ranked, trace) = beam_search(model, user, trie, beam_k)?;
    let mut out: Vec<ItemId> = Vec::with_capacity(k_max);
    for r in ranked {
        if !out.contains(&r.item) {
            out.push(r.item);
        }
        if out.len() == k_max {
            break;
        }
    }
    Ok((out, trace))
}
