//! Experiment operations over an artifact directory.
//!
//! Layout under the artifact root:
//!
//! ```text
//! data/embeddings.txt, data/interactions.jsonl   synthetic dataset
//! quantizer/<sizes>-<hash>.txt                   fitted quantizers
//! runs/<run_name>/                               checkpoints, curves, metrics
//! ablation.csv                                   last ablation table
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use glass_core::corpus::{Corpus, ExampleRef, Partition};
use glass_core::decode::{rank_for_eval, PrefixTrie};
use glass_core::features::{level_sizes, FeatureBuilder};
use glass_core::model::{AdamW, ModelParams, TokenVocabulary};
use glass_core::pipeline::{evaluate, ranking_metrics, teacher_forced_accuracy, Trainer};
use glass_core::quantizer::{fit_full, QuantizerModel};
use glass_core::sidtier::TierTable;
use glass_core::synth::generate_synthetic;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{GlassError, Result};
use crate::formats::{self, Checkpoint};
use crate::metrics::{csv_path, write_crp_csv, write_gate_csv, MetricsDoc, TrainDoc};

pub const ARTIFACTS_ENV: &str = "GLASS_ARTIFACTS";

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Artifacts { root: root.into() }
    }

    /// `explicit`, else `$GLASS_ARTIFACTS`, else `./artifacts`.
    pub fn resolve(explicit: Option<PathBuf>) -> Self {
        let root = explicit
            .or_else(|| std::env::var_os(ARTIFACTS_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("artifacts"));
        Artifacts { root }
    }

    pub fn embeddings(&self, cfg: &RunConfig) -> PathBuf {
        if cfg.embeddings.is_empty() {
            self.root.join("data/embeddings.txt")
        } else {
            PathBuf::from(&cfg.embeddings)
        }
    }

    pub fn interactions(&self, cfg: &RunConfig) -> PathBuf {
        if cfg.interactions.is_empty() {
            self.root.join("data/interactions.jsonl")
        } else {
            PathBuf::from(&cfg.interactions)
        }
    }

    /// Quantizer file keyed by everything its fit depends on.
    pub fn quantizer(&self, cfg: &RunConfig) -> PathBuf {
        let mut h = Sha256::new();
        let mut keys = vec!["seed", "codebook_sizes", "kmeans_iters", "neighbors", "embeddings", "interactions"];
        if cfg.embeddings.is_empty() {
            keys.extend(crate::config::KEYS.iter().map(|(k, _)| *k).filter(|k| k.starts_with("synth.")));
        }
        for k in keys {
            h.update(format!("{k}={}\n", cfg.get(k).unwrap()).as_bytes());
        }
        let tag = &hex::encode(h.finalize())[..12];
        let s = cfg.codebook_sizes;
        self.root.join(format!("quantizer/{}-{}-{}-{tag}.txt", s[0], s[1], s[2]))
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }
}

// --------------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_history_len: f64,
    pub d_emb: usize,
}

impl CorpusStats {
    pub fn of(c: &Corpus) -> Self {
        CorpusStats {
            users: c.sequences().len(),
            items: c.items().len(),
            interactions: c.sequences().iter().map(|s| s.items.len()).sum(),
            avg_history_len: c.mean_sequence_len(),
            d_emb: c.d_emb(),
        }
    }

    pub fn table(&self) -> String {
        format!(
            "| Users | Items | Interactions | Avg historical sequence length | Embedding dim |\n\
             |---|---|---|---|---|\n\
             | {} | {} | {} | {:.1} | {} |\n",
            self.users, self.items, self.interactions, self.avg_history_len, self.d_emb
        )
    }
}

pub fn synth(cfg: &RunConfig, art: &Artifacts) -> Result<CorpusStats> {
    let corpus = generate_synthetic(&cfg.synth())?;
    formats::emit(&corpus, &art.embeddings(cfg), &art.interactions(cfg))?;
    Ok(CorpusStats::of(&corpus))
}

pub fn load_corpus(cfg: &RunConfig, art: &Artifacts) -> Result<Corpus> {
    Ok(formats::ingest(&art.embeddings(cfg), &art.interactions(cfg))?.0)
}

// ----------------------------------------------------------------- quantizer

pub fn fit_quantizer(cfg: &RunConfig, art: &Artifacts, corpus: &Corpus) -> Result<QuantizerModel> {
    let q = fit_full(corpus, cfg.codebook_sizes, cfg.kmeans_iters, cfg.seed.wrapping_add(1), cfg.neighbors)?;
    let colliding = q.assignments.values().filter(|s| s.suffix > 0).count();
    log::info!(
        "quantizer {:?}: {} items, {} need a suffix (max suffix {})",
        cfg.codebook_sizes,
        q.assignments.len(),
        colliding,
        q.max_suffix()
    );
    formats::write_quantizer(&art.quantizer(cfg), &q)?;
    Ok(q)
}

pub fn quantizer_for(cfg: &RunConfig, art: &Artifacts, corpus: &Corpus) -> Result<QuantizerModel> {
    let path = art.quantizer(cfg);
    if path.exists() {
        formats::read_quantizer(&path)
    } else {
        fit_quantizer(cfg, art, corpus)
    }
}

/// Corpus, quantizer and the structures derived from them.
pub struct Prepared {
    pub corpus: Corpus,
    pub quantizer: QuantizerModel,
    pub level_sizes: Vec<usize>,
    pub vocab: TokenVocabulary,
    pub tiers: Option<TierTable>,
    pub trie: PrefixTrie,
}

impl Prepared {
    pub fn load(cfg: &RunConfig, art: &Artifacts) -> Result<Self> {
        cfg.validate()?;
        let corpus = load_corpus(cfg, art)?;
        let quantizer = quantizer_for(cfg, art, &corpus)?;
        let level_sizes = level_sizes(&quantizer);
        let vocab = TokenVocabulary::new(&level_sizes);
        let tiers = if cfg.sidtier { Some(TierTable::new(&quantizer, &corpus, cfg.tiers)?) } else { None };
        let trie = PrefixTrie::from_quantizer(&quantizer, &vocab)?;
        Ok(Prepared { corpus, quantizer, level_sizes, vocab, tiers, trie })
    }

    pub fn builder(&self, cfg: &RunConfig) -> FeatureBuilder<'_> {
        FeatureBuilder {
            corpus: &self.corpus,
            quantizer: &self.quantizer,
            vocab: &self.vocab,
            short_len: cfg.short_len,
            tiers: self.tiers.as_ref(),
            retrieval: cfg.retrieval(),
        }
    }

    pub fn examples(&self, p: Partition, limit: usize) -> Vec<ExampleRef> {
        let it = self.corpus.examples(p);
        if limit > 0 {
            it.take(limit).collect()
        } else {
            it.collect()
        }
    }
}

// --------------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: u64,
    pub loss: f64,
    pub val_hit10: f64,
    pub acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub best_step: u64,
    pub best_val_hit10: f64,
    pub curve: Vec<CurveRow>,
}

pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const CURVE: &str = "train_curve.csv";

fn write_curve(path: &Path, rows: &[CurveRow], levels: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path(path, e))?;
    let mut header = vec!["step".to_string(), "loss".into(), "val_hit10".into()];
    header.extend((1..=levels).map(|i| format!("acc_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.loss.to_string(), r.val_hit10.to_string()];
        rec.extend(r.acc.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| GlassError::io(path, e))
}

fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_path(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| GlassError::parse(path, rows.len() + 2, "bad curve value"))
        };
        rows.push(CurveRow {
            step: num(0)? as u64,
            loss: num(1)?,
            val_hit10: num(2)?,
            acc: (3..rec.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

fn check_arch(cfg: &RunConfig, ck: &Checkpoint, path: &Path) -> Result<()> {
    if ck.config.arch_hash() != cfg.arch_hash() {
        return Err(GlassError::Config(format!(
            "{} was trained with a different architecture (arch hash {} vs {})",
            path.display(),
            &ck.config.arch_hash()[..12],
            &cfg.arch_hash()[..12]
        )));
    }
    Ok(())
}

/// Trains with early stopping on validation Hit@10. With `resume`, picks up
/// from the run's last checkpoint when one exists.
pub fn train(cfg: &RunConfig, art: &Artifacts, resume: bool) -> Result<TrainOutcome> {
    let prep = Prepared::load(cfg, art)?;
    let dir = art.run_dir(&cfg.run_name);
    fs::create_dir_all(&dir).map_err(|e| GlassError::io(&dir, e))?;
    let last_path = dir.join(LAST);
    let curve_path = dir.join(CURVE);

    let (model, opt, mut best_step, mut best_hit, mut bad, mut curve) = if resume && last_path.exists() {
        let ck = formats::read_checkpoint(&last_path)?;
        check_arch(cfg, &ck, &last_path)?;
        if ck.model.config().level_sizes != prep.level_sizes {
            return Err(GlassError::Config("checkpoint token levels differ from the quantizer".into()));
        }
        log::info!("resuming {} at step {}", cfg.run_name, ck.opt.step);
        let mut opt = ck.opt;
        opt.config = cfg.optimizer();
        let curve: Vec<CurveRow> = read_curve(&curve_path)?.into_iter().filter(|r| r.step <= opt.step).collect();
        (ck.model, opt, ck.best_step, ck.best_val_hit10, ck.bad_evals, curve)
    } else {
        let model = ModelParams::new(cfg.model(prep.level_sizes.clone()), cfg.seed.wrapping_add(2))?;
        let opt = AdamW::new(cfg.optimizer(), model.store());
        (model, opt, 0, -1.0, 0, Vec::new())
    };

    let builder = prep.builder(cfg);
    let val = prep.examples(Partition::Validation, cfg.val_limit);
    let mut trainer = Trainer {
        model,
        opt,
        builder,
        pool: prep.examples(Partition::Train, 0),
        batch_size: cfg.batch_size,
        seed: cfg.seed.wrapping_add(3),
    };
    let save = |trainer: &Trainer<'_>, best_step, best_hit, bad, path: &Path| {
        formats::write_checkpoint(
            path,
            &Checkpoint {
                config: cfg.clone(),
                model: trainer.model.clone(),
                opt: trainer.opt.clone(),
                best_step,
                best_val_hit10: best_hit,
                bad_evals: bad,
            },
        )
    };
    if !dir.join(BEST).exists() {
        save(&trainer, best_step, best_hit, bad, &dir.join(BEST))?;
    }

    let mut loss_sum = 0.0;
    let mut loss_n = 0u64;
    while trainer.opt.step < cfg.max_steps && bad < cfg.patience {
        loss_sum += trainer.step()?;
        loss_n += 1;
        let step = trainer.opt.step;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let hit10 = if val.is_empty() {
                0.0
            } else {
                ranking_metrics(&trainer.model, &builder, &prep.trie, &val, cfg.beam_k)?.hit[&10]
            };
            let acc = if val.is_empty() { vec![0.0; prep.level_sizes.len()] } else { teacher_forced_accuracy(&trainer.model, &builder, &val)? };
            let loss = loss_sum / loss_n as f64;
            log::info!("{} step {step}: loss {loss:.4} val hit@10 {hit10:.4}", cfg.run_name);
            curve.push(CurveRow { step, loss, val_hit10: hit10, acc });
            loss_sum = 0.0;
            loss_n = 0;
            if hit10 > best_hit {
                best_hit = hit10;
                best_step = step;
                bad = 0;
                save(&trainer, best_step, best_hit, bad, &dir.join(BEST))?;
            } else {
                bad += 1;
            }
            save(&trainer, best_step, best_hit, bad, &last_path)?;
            write_curve(&curve_path, &curve, prep.level_sizes.len())?;
        }
    }
    if bad >= cfg.patience {
        log::info!("{}: early stop after {} passes without improvement", cfg.run_name, bad);
    }
    Ok(TrainOutcome { steps: trainer.opt.step, best_step, best_val_hit10: best_hit, curve })
}

// ---------------------------------------------------------------------- eval

pub const METRICS: &str = "metrics.json";

/// Evaluates the run's best checkpoint on the test split and writes the
/// metrics document and plot CSVs.
pub fn eval(cfg: &RunConfig, art: &Artifacts) -> Result<MetricsDoc> {
    let prep = Prepared::load(cfg, art)?;
    let dir = art.run_dir(&cfg.run_name);
    let best_path = dir.join(BEST);
    let ck = formats::read_checkpoint(&best_path)?;
    check_arch(cfg, &ck, &best_path)?;
    if ck.model.config().level_sizes != prep.level_sizes {
        return Err(GlassError::Config("checkpoint token levels differ from the quantizer".into()));
    }
    let test = prep.examples(Partition::Test, 0);
    if test.is_empty() {
        return Err(GlassError::Core(glass_core::Error::EmptyCorpus));
    }
    let builder = prep.builder(cfg);
    let e = evaluate(&ck.model, &builder, &prep.trie, &test, cfg.beam_k, cfg.gate_bin_width)?;
    let steps = match formats::read_checkpoint(&dir.join(LAST)) {
        Ok(last) => last.opt.step,
        Err(_) => ck.opt.step,
    };
    let doc = MetricsDoc::new(
        cfg,
        &prep.level_sizes,
        &e,
        TrainDoc { steps, best_step: ck.best_step, best_val_hit10: ck.best_val_hit10.max(0.0) },
    );
    formats::write_file(&dir.join(METRICS), &doc.to_json()?)?;
    write_gate_csv(&dir.join("gate.csv"), &doc)?;
    write_crp_csv(&dir.join("crp.csv"), &doc)?;
    Ok(doc)
}

#[derive(Serialize)]
struct TraceBeam<'a> {
    prefix: &'a [usize],
    cum_logprob: f64,
}

#[derive(Serialize)]
struct TraceGate {
    level: usize,
    retrieved_length: usize,
    mean_gate: f64,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    seq: usize,
    target: u64,
    depths: Vec<Vec<TraceBeam<'a>>>,
    gates: Vec<TraceGate>,
}

/// One JSON line per test example with the beams at every depth.
pub fn write_traces(cfg: &RunConfig, art: &Artifacts) -> Result<PathBuf> {
    let prep = Prepared::load(cfg, art)?;
    let dir = art.run_dir(&cfg.run_name);
    let ck = formats::read_checkpoint(&dir.join(BEST))?;
    check_arch(cfg, &ck, &dir.join(BEST))?;
    let builder = prep.builder(cfg);
    let mut out = String::new();
    for ex in prep.examples(Partition::Test, 0) {
        let user = builder.user_context(ex)?;
        let (_, trace) = rank_for_eval(&ck.model, &user, &prep.trie, cfg.beam_k, cfg.beam_k.min(20))?;
        let line = TraceLine {
            seq: ex.seq,
            target: user.target.0,
            depths: trace
                .depths
                .iter()
                .map(|d| d.iter().map(|(p, c)| TraceBeam { prefix: p, cum_logprob: *c }).collect())
                .collect(),
            gates: trace
                .gates
                .iter()
                .map(|g| TraceGate { level: g.level, retrieved_length: g.retrieved_length, mean_gate: g.mean_gate })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    let path = dir.join("traces.jsonl");
    formats::write_file(&path, &out)?;
    Ok(path)
}

// -------------------------------------------------------------------- ablate

/// Lattice points and resizing variants derived from `cfg`.
pub fn ablation_configs(cfg: &RunConfig) -> Vec<RunConfig> {
    let base = &cfg.run_name;
    let point = |name: &str, sidtier, shs, aug| RunConfig {
        run_name: format!("{base}-{name}"),
        sidtier,
        shs,
        neighbor_aug: aug,
        ..cfg.clone()
    };
    let mut out = vec![
        point("base", false, false, false),
        point("sidtier", true, false, false),
        point("sidtier-shs", true, true, false),
        point("sidtier-shs-aug", true, true, true),
    ];
    for &k0 in &cfg.ablate_k0 {
        let mut c = point(&format!("k0-{k0}"), true, true, true);
        c.codebook_sizes[0] = k0;
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub run: String,
    /// Metric name → value, in column order.
    pub values: Vec<(String, f64)>,
    /// Relative change against the first row, per metric; `None` when the
    /// baseline value is 0.
    pub deltas: Vec<Option<f64>>,
}

pub fn metric_columns(doc: &MetricsDoc) -> Vec<(String, f64)> {
    let mut cols: Vec<(String, f64)> = Vec::new();
    let mut hit: Vec<(usize, f64)> = doc.hit.iter().map(|(k, v)| (k.parse().unwrap_or(0), *v)).collect();
    hit.sort_by_key(|(k, _)| *k);
    cols.extend(hit.into_iter().map(|(k, v)| (format!("hit@{k}"), v)));
    let mut ndcg: Vec<(usize, f64)> = doc.ndcg.iter().map(|(k, v)| (k.parse().unwrap_or(0), *v)).collect();
    ndcg.sort_by_key(|(k, _)| *k);
    cols.extend(ndcg.into_iter().map(|(k, v)| (format!("ndcg@{k}"), v)));
    cols
}

/// Joins metrics documents into rows with deltas relative to the first.
pub fn ablation_table(docs: &[MetricsDoc]) -> Vec<AblationRow> {
    let Some(first) = docs.first() else { return Vec::new() };
    let base = metric_columns(first);
    docs.iter()
        .map(|d| {
            let values = metric_columns(d);
            let deltas = values
                .iter()
                .zip(&base)
                .map(|((_, v), (_, b))| (*b != 0.0).then(|| (v - b) / b))
                .collect();
            AblationRow { run: d.run.clone(), values, deltas }
        })
        .collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path(path, e))?;
    if let Some(first) = rows.first() {
        let mut header = vec!["run".to_string()];
        for (name, _) in &first.values {
            header.push(name.clone());
            header.push(format!("{name}_rel"));
        }
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec = vec![r.run.clone()];
        for ((_, v), d) in r.values.iter().zip(&r.deltas) {
            rec.push(v.to_string());
            rec.push(d.map_or(String::new(), |d| d.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| GlassError::io(path, e))
}

pub fn render_table(rows: &[AblationRow]) -> String {
    let Some(first) = rows.first() else { return String::from("(no runs)\n") };
    let mut out = String::from("| run |");
    for (name, _) in &first.values {
        out.push_str(&format!(" {name} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(first.values.len()));
    out.push('\n');
    for r in rows {
        out.push_str(&format!("| {} |", r.run));
        for ((_, v), d) in r.values.iter().zip(&r.deltas) {
            match d {
                Some(d) if r.run != first.run => out.push_str(&format!(" {v:.4} ({:+.1}%) |", 100.0 * d)),
                _ => out.push_str(&format!(" {v:.4} |")),
            }
        }
        out.push('\n');
    }
    out
}

/// Trains and evaluates every lattice point, then writes `ablation.csv`.
pub fn ablate(cfg: &RunConfig, art: &Artifacts) -> Result<Vec<AblationRow>> {
    let mut docs = Vec::new();
    for c in ablation_configs(cfg) {
        c.validate()?;
        let dir = art.run_dir(&c.run_name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| GlassError::io(&dir, e))?;
        }
        train(&c, art, false)?;
        docs.push(eval(&c, art)?);
    }
    let rows = ablation_table(&docs);
    write_ablation_csv(&art.root.join("ablation.csv"), &rows)?;
    Ok(rows)
}

/// Metrics documents of every run under the artifact root, by run name.
pub fn collect_metrics(art: &Artifacts) -> Result<Vec<MetricsDoc>> {
    let runs = art.root.join("runs");
    let mut docs = Vec::new();
    if !runs.exists() {
        return Ok(docs);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)
        .map_err(|e| GlassError::io(&runs, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    dirs.sort();
    for d in dirs {
        let p = d.join(METRICS);
        if p.exists() {
            let text = fs::read_to_string(&p).map_err(|e| GlassError::io(&p, e))?;
            docs.push(MetricsDoc::validate_json(&text)?);
        }
    }
    Ok(docs)
}
