//! Residual k-means quantization of item embeddings into 3-level Semantic IDs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, ItemId};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, squared_distance};

/// Number of quantization levels.
pub const LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub level: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.vectors.len()
    }

    /// Index of the nearest vector; ties go to the smallest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, v) in self.vectors.iter().enumerate() {
            let d = squared_distance(x, v);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SemanticId {
    pub codes: [usize; LEVELS],
    /// Disambiguates items that share all three codes.
    pub suffix: usize,
}

impl SemanticId {
    pub fn first(&self) -> usize {
        self.codes[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerModel {
    pub codebooks: Vec<Codebook>,
    pub assignments: BTreeMap<ItemId, SemanticId>,
    /// Mean embedding of the items under each used first-level codeword.
    pub prototypes: BTreeMap<usize, Vec<f64>>,
    /// Nearest first-level codewords by codebook cosine, best first.
    pub neighbor_dict: BTreeMap<usize, Vec<usize>>,
}

impl QuantizerModel {
    pub fn sizes(&self) -> [usize; LEVELS] {
        let mut s = [0; LEVELS];
        for (o, cb) in s.iter_mut().zip(&self.codebooks) {
            *o = cb.size();
        }
        s
    }

    pub fn d_emb(&self) -> usize {
        self.codebooks[0].vectors[0].len()
    }

    pub fn sid(&self, item: ItemId) -> Option<SemanticId> {
        self.assignments.get(&item).copied()
    }

    pub fn max_suffix(&self) -> usize {
        self.assignments.values().map(|s| s.suffix).max().unwrap_or(0)
    }

    /// Sum of the selected codebook vectors.
    pub fn reconstruct(&self, codes: &[usize; LEVELS]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_emb()];
        for (cb, &c) in self.codebooks.iter().zip(codes) {
            for (o, v) in out.iter_mut().zip(&cb.vectors[c]) {
                *o += v;
            }
        }
        out
    }

    /// Mean squared residual norm of `embeddings` before quantization
    /// (index 0) and after each level (index `j + 1`).
    pub fn residual_energies<'a>(&self, embeddings: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
        let mut sums = vec![0.0; LEVELS + 1];
        let mut n = 0usize;
        for x in embeddings {
            let mut r = x.to_vec();
            sums[0] += r.iter().map(|v| v * v).sum::<f64>();
            for (j, cb) in self.codebooks.iter().enumerate() {
                let c = cb.nearest(&r);
                for (rv, cv) in r.iter_mut().zip(&cb.vectors[c]) {
                    *rv -= cv;
                }
                sums[j + 1] += r.iter().map(|v| v * v).sum::<f64>();
            }
            n += 1;
        }
        sums.iter().map(|s| s / n.max(1) as f64).collect()
    }
}

/// Fits the three codebooks by residual k-means and assigns every corpus
/// item (suffix 0). Prototypes and neighbors are left empty.
pub fn fit(corpus: &Corpus, sizes: [usize; LEVELS], max_iters: usize, seed: u64) -> Result<QuantizerModel> {
    for (j, &k) in sizes.iter().enumerate() {
        if k < 2 {
            return Err(Error::Parameter(format!("codebook {j} needs at least 2 entries, got {k}")));
        }
    }
    let mut residuals: Vec<Vec<f64>> = Vec::with_capacity(corpus.items().len());
    for item in corpus.items() {
        if item.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("item {} has a non-finite embedding", item.id.0)));
        }
        residuals.push(item.embedding.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codebooks = Vec::with_capacity(LEVELS);
    for (level, &k) in sizes.iter().enumerate() {
        // Deeper levels may see fewer distinct residuals than codewords; every
        // residual then gets its own centroid and the rest are padding.
        let k_fit = if level == 0 { k } else { k.min(count_distinct(&residuals)) };
        let (mut centroids, assign) = kmeans(&residuals, k_fit, max_iters, &mut rng)
            .map_err(|e| match e {
                Error::DegenerateData(m) => Error::DegenerateData(format!("level {level}: {m}")),
                other => other,
            })?;
        let span = centroids.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        for pad in 0..k - k_fit {
            let mut v = centroids[0].clone();
            v[0] += 2.0 * span * (pad + 1) as f64;
            centroids.push(v);
        }
        for (r, &a) in residuals.iter_mut().zip(&assign) {
            for (rv, cv) in r.iter_mut().zip(&centroids[a]) {
                *rv -= cv;
            }
        }
        codebooks.push(Codebook { level, vectors: centroids });
    }
    let mut model = QuantizerModel {
        codebooks,
        assignments: BTreeMap::new(),
        prototypes: BTreeMap::new(),
        neighbor_dict: BTreeMap::new(),
    };
    for item in corpus.items() {
        let sid = encode(&model, &item.embedding)?;
        model.assignments.insert(item.id, sid);
    }
    Ok(model)
}

/// Fit, then disambiguate collisions, pool prototypes and build the
/// `k`-neighbor dictionary.
pub fn fit_full(
    corpus: &Corpus,
    sizes: [usize; LEVELS],
    max_iters: usize,
    seed: u64,
    k_neighbors: usize,
) -> Result<QuantizerModel> {
    let mut model = resolve_collisions(fit(corpus, sizes, max_iters, seed)?);
    model.prototypes = build_prototypes(&model, corpus);
    model.neighbor_dict = build_neighbor_dict(&model, k_neighbors)?;
    Ok(model)
}

/// Greedy residual assignment, smallest index on ties.
pub fn encode(model: &QuantizerModel, embedding: &[f64]) -> Result<SemanticId> {
    if embedding.len() != model.d_emb() {
        return Err(Error::Data(format!(
            "embedding has dimension {}, quantizer expects {}",
            embedding.len(),
            model.d_emb()
        )));
    }
    let mut r = embedding.to_vec();
    let mut codes = [0; LEVELS];
    for (j, cb) in model.codebooks.iter().enumerate() {
        let c = cb.nearest(&r);
        codes[j] = c;
        for (rv, cv) in r.iter_mut().zip(&cb.vectors[c]) {
            *rv -= cv;
        }
    }
    Ok(SemanticId { codes, suffix: 0 })
}

/// Items sharing a code triple get suffixes 0, 1, 2, ... in item id order.
pub fn resolve_collisions(mut model: QuantizerModel) -> QuantizerModel {
    let mut next: BTreeMap<[usize; LEVELS], usize> = BTreeMap::new();
    // BTreeMap iteration is already in item id order.
    for sid in model.assignments.values_mut() {
        let slot = next.entry(sid.codes).or_insert(0);
        sid.suffix = *slot;
        *slot += 1;
    }
    model
}

pub fn build_prototypes(model: &QuantizerModel, corpus: &Corpus) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for item in corpus.items() {
        let Some(sid) = model.assignments.get(&item.id) else { continue };
        let entry = sums.entry(sid.first()).or_insert_with(|| (vec![0.0; item.embedding.len()], 0));
        for (s, v) in entry.0.iter_mut().zip(&item.embedding) {
            *s += v;
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(a, (mut s, n))| {
            s.iter_mut().for_each(|v| *v /= n as f64);
            (a, s)
        })
        .collect()
}

pub fn build_neighbor_dict(model: &QuantizerModel, k: usize) -> Result<BTreeMap<usize, Vec<usize>>> {
    if k == 0 {
        return Err(Error::Parameter("neighbor count k must be at least 1".into()));
    }
    let vectors = &model.codebooks[0].vectors;
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    if let Some(a) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Numeric(format!("first-level codeword {a} has zero norm")));
    }
    let mut dict = BTreeMap::new();
    for a in 0..vectors.len() {
        let mut scored: Vec<(f64, usize)> = (0..vectors.len())
            .filter(|&b| b != a)
            .map(|b| (dot(&vectors[a], &vectors[b]) / (norms[a] * norms[b]), b))
            .collect();
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        dict.insert(a, scored.into_iter().take(k).map(|(_, b)| b).collect());
    }
    Ok(dict)
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Lloyd's algorithm with k-means++ seeding. Returns centroids and the final
/// nearest-centroid assignment.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(Error::DegenerateData(format!("{distinct} distinct points cannot fill {k} centroids")));
    }
    let n = points.len();
    let dim = points[0].len();

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut pick = n - 1;
        if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
        }
        let c = points[pick].clone();
        for (slot, p) in d2.iter_mut().zip(points) {
            *slot = slot.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }

    let nearest = |centroids: &[Vec<f64>], p: &[f64]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (c, v) in centroids.iter().enumerate() {
            let d = squared_distance(p, v);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(&centroids, p);
            dist[i] = d;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        // Re-seed empty clusters at the worst-served point.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let worst = (0..n)
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&x, &y| dist[x].total_cmp(&dist[y]).then(y.cmp(&x)));
            if let Some(i) = worst {
                counts[assign[i]] -= 1;
                assign[i] = c;
                counts[c] = 1;
                dist[i] = 0.0;
                centroids[c] = points[i].clone();
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assign) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, s) in sums.into_iter().enumerate() {
            if counts[c] > 0 {
                centroids[c] = s.into_iter().map(|v| v / counts[c] as f64).collect();
            }
        }
    }
    for (i, p) in points.iter().enumerate() {
        assign[i] = nearest(&centroids, p).0;
    }
    let mut sorted = centroids.iter().map(|c| c.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < k {
        return Err(Error::DegenerateData("k-means produced duplicate centroids".into()));
    }
    Ok((centroids, assign))
}
