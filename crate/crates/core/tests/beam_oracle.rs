mod common;

use common::{synth_corpus, Setup};
use glass_core::corpus::Partition;
use glass_core::decode::{beam_search, greedy_decode, level_log_softmax, rank_for_eval, PrefixTrie};
use glass_core::features::UserContext;
use glass_core::model::ModelParams;

fn all_paths(trie: &PrefixTrie) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack = vec![Vec::new()];
    while let Some(p) = stack.pop() {
        if p.len() == trie.depth() {
            out.push(p);
            continue;
        }
        for t in trie.children(&p) {
            let mut q = p.clone();
            q.push(t);
            stack.push(q);
        }
    }
    out
}

fn path_logprob(m: &ModelParams, user: &UserContext<'_>, path: &[usize]) -> f64 {
    let enc = m.encode_user(&user.input).unwrap();
    let c0 = m.vocab().code_of(path[0]).unwrap().1;
    let (_, retrieved) = user.retrieve(c0).unwrap();
    let mut total = 0.0;
    for l in 0..path.len() {
        let mut prefix = vec![m.vocab().bos()];
        prefix.extend_from_slice(&path[..l]);
        let ret: &[usize] = if l == 0 { &[] } else { &retrieved };
        let step = m.decode_step(&enc, &prefix, ret).unwrap();
        total += level_log_softmax(&step.logits)[path[l]];
    }
    total
}

fn check_setup(full: bool, seed: u64) {
    let s = Setup::new(synth_corpus(6, 48, 40, seed), [4, 4, 4], seed);
    let builder = s.builder(4, full);
    let m = ModelParams::new(s.model_config(4, full), seed + 10).unwrap();
    let paths = all_paths(&s.trie);
    assert_eq!(paths.len(), s.trie.len());
    for ex in s.corpus.examples(Partition::Test) {
        let user = builder.user_context(ex).unwrap();
        let mut oracle: Vec<(Vec<usize>, f64)> = paths.iter().map(|p| (p.clone(), path_logprob(&m, &user, p))).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));

        let (ranked, trace) = beam_search(&m, &user, &s.trie, 64).unwrap();
        assert_eq!(ranked.len(), oracle.len());
        for (r, (p, lp)) in ranked.iter().zip(&oracle) {
            assert_eq!(&r.path, p);
            assert!((r.cum_logprob - lp).abs() < 1e-12);
            assert_eq!(s.trie.item(&r.path), Some(r.item));
            assert!(s.corpus.item(r.item).is_some());
        }
        assert_eq!(trace.depths.len(), s.trie.depth());

        let g = greedy_decode(&m, &user, &s.trie).unwrap();
        let (one, _) = beam_search(&m, &user, &s.trie, 1).unwrap();
        assert_eq!(one[0].path, g.path);
        assert_eq!(one[0].item, g.item);
        assert!((one[0].cum_logprob - g.cum_logprob).abs() < 1e-12);

        let (top, _) = rank_for_eval(&m, &user, &s.trie, 20, 20).unwrap();
        assert_eq!(top.len(), 20.min(paths.len()));
        let want: Vec<_> = oracle.iter().take(20).map(|(p, _)| s.trie.item(p).unwrap()).collect();
        assert_eq!(top, want);
    }
}

#[test]
fn wide_beam_equals_exhaustive_enumeration_without_retrieval() {
    check_setup(false, 1);
}

#[test]
fn wide_beam_equals_exhaustive_enumeration_with_retrieval() {
    check_setup(true, 2);
    check_setup(true, 3);
}
