//! Ranking metrics, per-level diagnostics, conditional rank progression and
//! gate-versus-retrieval summaries.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::ItemId;
use crate::decode::GateSample;
use crate::error::{Error, Result};

pub const HIT_KS: [usize; 5] = [1, 3, 5, 10, 20];
pub const NDCG_KS: [usize; 4] = [3, 5, 10, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub hit: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_examples: usize,
}

/// Single-relevant-item NDCG@K for a 1-based rank.
pub fn ndcg_at(rank: Option<usize>, k: usize) -> f64 {
    match rank {
        Some(r) if r <= k => 1.0 / libm::log2(r as f64 + 1.0),
        _ => 0.0,
    }
}

pub fn hit_ndcg(rankings: &[Vec<ItemId>], targets: &[ItemId]) -> Result<MetricReport> {
    if rankings.len() != targets.len() {
        return Err(Error::Data(format!("{} rankings for {} targets", rankings.len(), targets.len())));
    }
    let n = targets.len();
    let mut hit: BTreeMap<usize, f64> = HIT_KS.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg: BTreeMap<usize, f64> = NDCG_KS.iter().map(|&k| (k, 0.0)).collect();
    if n == 0 {
        return Ok(MetricReport { hit, ndcg, n_examples: 0 });
    }
    let mut hit_counts = [0usize; HIT_KS.len()];
    let mut gains = [0.0f64; NDCG_KS.len()];
    for (ranking, target) in rankings.iter().zip(targets) {
        let rank = ranking.iter().position(|x| x == target).map(|p| p + 1);
        for (c, &k) in hit_counts.iter_mut().zip(&HIT_KS) {
            if rank.is_some_and(|r| r <= k) {
                *c += 1;
            }
        }
        for (g, &k) in gains.iter_mut().zip(&NDCG_KS) {
            *g += ndcg_at(rank, k);
        }
    }
    for (&k, c) in HIT_KS.iter().zip(hit_counts) {
        hit.insert(k, c as f64 / n as f64);
    }
    for (&k, g) in NDCG_KS.iter().zip(gains) {
        ndcg.insert(k, g / n as f64);
    }
    Ok(MetricReport { hit, ndcg, n_examples: n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelDiagnostics {
    /// Teacher-forced argmax accuracy per level.
    pub acc: Vec<f64>,
    /// Greedy conditional precision per level; `None` when nobody is eligible.
    pub prec: Vec<Option<f64>>,
    /// `(correct, eligible)` behind each `prec` entry.
    pub prec_counts: Vec<(usize, usize)>,
}

/// `teacher[n][i]` is the level-`i` argmax under teacher forcing, `greedy[n]`
/// the greedy path, `truth[n]` the true tokens.
pub fn level_diagnostics(teacher: &[Vec<usize>], greedy: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<LevelDiagnostics> {
    let n = truth.len();
    if teacher.len() != n || greedy.len() != n {
        return Err(Error::Data("diagnostic inputs differ in length".into()));
    }
    let levels = truth.first().map_or(0, Vec::len);
    if truth.iter().chain(teacher).chain(greedy).any(|v| v.len() != levels) {
        return Err(Error::Data("diagnostic paths differ in depth".into()));
    }
    let mut acc = vec![0.0; levels];
    let mut prec_counts = vec![(0usize, 0usize); levels];
    for ((t, g), y) in teacher.iter().zip(greedy).zip(truth) {
        for i in 0..levels {
            if t[i] == y[i] {
                acc[i] += 1.0;
            }
        }
        for i in 0..levels {
            prec_counts[i].1 += 1;
            if g[i] != y[i] {
                break;
            }
            prec_counts[i].0 += 1;
        }
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    let prec = prec_counts.iter().map(|&(c, e)| (e > 0).then(|| c as f64 / e as f64)).collect();
    Ok(LevelDiagnostics { acc, prec, prec_counts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrpReport {
    /// Mean 1-based rank of the true prefix per depth, over eligible samples
    /// whose prefix is in that depth's beam; `None` if there are none.
    pub crp: Vec<Option<f64>>,
    /// `|E_d|`: samples whose true prefix survived every shallower depth.
    pub eligible_counts: Vec<usize>,
    /// Eligible samples whose true prefix is in the depth-`d` beam.
    pub hit_counts: Vec<usize>,
}

/// `traces[n][d]` lists the ranked depth-`d` beam prefixes of sample `n`.
pub fn crp(traces: &[Vec<Vec<Vec<usize>>>], true_paths: &[Vec<usize>], beam_k: usize) -> Result<CrpReport> {
    if traces.len() != true_paths.len() {
        return Err(Error::Data(format!("{} traces for {} targets", traces.len(), true_paths.len())));
    }
    let depth = true_paths.first().map_or(0, Vec::len);
    let mut sums = vec![0.0; depth];
    let mut eligible = vec![0usize; depth];
    let mut hits = vec![0usize; depth];
    for (trace, truth) in traces.iter().zip(true_paths) {
        if trace.len() != depth || truth.len() != depth {
            return Err(Error::Data(format!("trace depth {} vs target depth {}", trace.len(), truth.len())));
        }
        for d in 0..depth {
            if trace[d].len() > beam_k {
                return Err(Error::Data(format!("beam at depth {} holds {} > {beam_k} prefixes", d + 1, trace[d].len())));
            }
            eligible[d] += 1;
            match trace[d].iter().position(|p| p[..] == truth[..=d]) {
                Some(r) => {
                    hits[d] += 1;
                    sums[d] += (r + 1) as f64;
                }
                None => break,
            }
        }
    }
    let crp = sums.iter().zip(&hits).map(|(&s, &h)| (h > 0).then(|| s / h as f64)).collect();
    Ok(CrpReport { crp, eligible_counts: eligible, hit_counts: hits })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateBin {
    /// Retrieved lengths in `[lo, lo + width)`.
    pub lo: usize,
    pub count: usize,
    pub mean_gate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub bin_width: usize,
    pub bins: Vec<GateBin>,
    /// Rank correlation of retrieved length with mean gate; `None` when
    /// either side is constant or there are fewer than two samples.
    pub spearman: Option<f64>,
    pub n_samples: usize,
}

pub fn gate_trace_report(samples: &[GateSample], bin_width: usize) -> Result<GateReport> {
    if bin_width == 0 {
        return Err(Error::Parameter("gate bin width must be positive".into()));
    }
    let mut groups: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for s in samples {
        let e = groups.entry(s.retrieved_length / bin_width * bin_width).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += s.mean_gate;
    }
    let bins = groups
        .into_iter()
        .map(|(lo, (count, total))| GateBin { lo, count, mean_gate: total / count as f64 })
        .collect();
    let xs: Vec<f64> = samples.iter().map(|s| s.retrieved_length as f64).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.mean_gate).collect();
    Ok(GateReport { bin_width, bins, spearman: spearman(&xs, &ys), n_samples: samples.len() })
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation (Pearson over average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_three_gives_half_ndcg() {
        let r = vec![vec![ItemId(5), ItemId(6), ItemId(7)]];
        let m = hit_ndcg(&r, &[ItemId(7)]).unwrap();
        assert_eq!(m.ndcg[&5], 0.5);
        assert_eq!(m.hit[&1], 0.0);
        assert_eq!(m.hit[&3], 1.0);
        let miss = hit_ndcg(&r, &[ItemId(9)]).unwrap();
        assert!(miss.hit.values().chain(miss.ndcg.values()).all(|&v| v == 0.0));
    }

    #[test]
    fn crp_mean_of_ranks() {
        let p = |a: usize, b: usize| vec![a, b];
        let traces = vec![
            vec![vec![vec![1]], vec![p(1, 0), p(1, 9)]],
            vec![vec![vec![1]], vec![p(1, 0), p(1, 1), p(1, 2), p(1, 9)]],
        ];
        let truth = vec![vec![1, 9], vec![1, 9]];
        let r = crp(&traces, &truth, 4).unwrap();
        assert_eq!(r.crp, vec![Some(1.0), Some(3.0)]);
        assert_eq!(r.eligible_counts, vec![2, 2]);
        assert!(matches!(crp(&traces, &truth[..1], 4), Err(Error::Data(_))));
    }

    #[test]
    fn undefined_precision_is_none() {
        let d = level_diagnostics(&[vec![0, 0]], &[vec![1, 0]], &[vec![0, 0]]).unwrap();
        assert_eq!(d.acc, vec![1.0, 1.0]);
        assert_eq!(d.prec, vec![Some(0.0), None]);
    }

    #[test]
    fn empty_retrievals_collapse_to_one_bin() {
        let s = vec![GateSample { level: 1, retrieved_length: 0, mean_gate: 0.0 }; 5];
        let r = gate_trace_report(&s, 4).unwrap();
        assert_eq!(r.bins, vec![GateBin { lo: 0, count: 5, mean_gate: 0.0 }]);
        assert_eq!(r.spearman, None);
    }

    #[test]
    fn spearman_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let s = spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((s + 1.0).abs() < 1e-12);
    }
}
