//! Training steps over sampled examples and full evaluation passes.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ExampleRef, ItemId};
use crate::decode::{greedy_decode, rank_for_eval, GateSample, PrefixTrie};
use crate::error::{Error, Result};
use crate::eval::{crp, gate_trace_report, hit_ndcg, level_diagnostics, CrpReport, GateReport, LevelDiagnostics, MetricReport};
use crate::features::FeatureBuilder;
use crate::model::{AdamW, ModelParams, TrainExample};

/// Deterministic batch for optimizer step `step`: uniform draws with
/// replacement from `pool`.
pub fn sample_batch(pool: &[ExampleRef], batch_size: usize, seed: u64, step: u64) -> Vec<ExampleRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    (0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Model, optimizer state and example pool; one call to [`Trainer::step`]
/// per optimizer update. The step counter lives in the optimizer, so a
/// restored `(model, optimizer)` pair continues the same batch sequence.
pub struct Trainer<'a> {
    pub model: ModelParams,
    pub opt: AdamW,
    pub builder: FeatureBuilder<'a>,
    pub pool: Vec<ExampleRef>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Trainer<'_> {
    pub fn batch(&self) -> Result<Vec<TrainExample>> {
        if self.pool.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        sample_batch(&self.pool, self.batch_size, self.seed, self.opt.step)
            .into_iter()
            .map(|ex| self.builder.train_example(ex))
            .collect()
    }

    pub fn step(&mut self) -> Result<f64> {
        let batch = self.batch()?;
        self.model.train_step(&mut self.opt, &batch, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricReport,
    pub levels: LevelDiagnostics,
    pub crp: CrpReport,
    pub gates: GateReport,
    pub gate_samples: Vec<GateSample>,
    /// Examples whose greedy path reaches the target.
    pub greedy_hits: usize,
    pub n_examples: usize,
}

impl Evaluation {
    pub fn greedy_hit_rate(&self) -> f64 {
        if self.n_examples == 0 {
            0.0
        } else {
            self.greedy_hits as f64 / self.n_examples as f64
        }
    }
}

/// Beam ranking only, for model selection.
pub fn ranking_metrics(
    model: &ModelParams,
    builder: &FeatureBuilder<'_>,
    trie: &PrefixTrie,
    examples: &[ExampleRef],
    beam_k: usize,
) -> Result<MetricReport> {
    let mut rankings = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    for &ex in examples {
        let user = builder.user_context(ex)?;
        rankings.push(rank_for_eval(model, &user, trie, beam_k, beam_k.min(20))?.0);
        targets.push(user.target);
    }
    hit_ndcg(&rankings, &targets)
}

fn argmax_in(row: &[f64], range: core::ops::Range<usize>) -> usize {
    let mut best = range.start;
    for t in range {
        if row[t] > row[best] {
            best = t;
        }
    }
    best
}

/// Per-level teacher-forced argmax accuracy.
pub fn teacher_forced_accuracy(model: &ModelParams, builder: &FeatureBuilder<'_>, examples: &[ExampleRef]) -> Result<Vec<f64>> {
    let levels = model.config().levels();
    let mut correct = alloc::vec![0usize; levels];
    for &ex in examples {
        let te = builder.train_example(ex)?;
        let tf = model.teacher_forced_logits(&te)?;
        for (q, c) in correct.iter_mut().enumerate() {
            if argmax_in(tf.row(q), model.vocab().level_range(q)) == te.target[q] {
                *c += 1;
            }
        }
    }
    let n = examples.len().max(1) as f64;
    Ok(correct.into_iter().map(|c| c as f64 / n).collect())
}

/// Full evaluation: beam metrics, level diagnostics, CRP and gate traces.
pub fn evaluate(
    model: &ModelParams,
    builder: &FeatureBuilder<'_>,
    trie: &PrefixTrie,
    examples: &[ExampleRef],
    beam_k: usize,
    gate_bin_width: usize,
) -> Result<Evaluation> {
    let levels = model.config().levels();
    let mut rankings: Vec<Vec<ItemId>> = Vec::new();
    let mut targets = Vec::new();
    let mut traces = Vec::new();
    let mut truths = Vec::new();
    let mut teacher = Vec::new();
    let mut greedy = Vec::new();
    let mut gate_samples = Vec::new();
    let mut greedy_hits = 0;
    for &ex in examples {
        let user = builder.user_context(ex)?;
        let (ranking, trace) = rank_for_eval(model, &user, trie, beam_k, beam_k.min(20))?;
        rankings.push(ranking);
        targets.push(user.target);
        traces.push(trace.depths.iter().map(|d| d.iter().map(|(p, _)| p.clone()).collect()).collect::<Vec<Vec<_>>>());
        gate_samples.extend(trace.gates);

        let g = greedy_decode(model, &user, trie)?;
        if g.item == user.target {
            greedy_hits += 1;
        }
        greedy.push(g.path);

        let tf = model.teacher_forced_logits(&builder.train_example(ex)?)?;
        teacher.push((0..levels).map(|q| argmax_in(tf.row(q), model.vocab().level_range(q))).collect());
        truths.push(user.target_tokens);
    }
    Ok(Evaluation {
        metrics: hit_ndcg(&rankings, &targets)?,
        levels: level_diagnostics(&teacher, &greedy, &truths)?,
        crp: crp(&traces, &truths, beam_k)?,
        gates: gate_trace_report(&gate_samples, gate_bin_width)?,
        gate_samples,
        greedy_hits,
        n_examples: examples.len(),
    })
}
