//! Metrics document written per run, and the plot CSVs next to it.
//!
//! The document types deny unknown fields, so deserializing a file through
//! [`MetricsDoc::validate_json`] doubles as schema validation.

use std::collections::BTreeMap;
use std::path::Path;

use glass_core::eval::{HIT_KS, NDCG_KS};
use glass_core::pipeline::Evaluation;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{GlassError, Result};

pub const SCHEMA: &str = "glass-metrics/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    pub sidtier: bool,
    pub shs: bool,
    pub neighbor_aug: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelsDoc {
    pub acc: Vec<f64>,
    /// `null` where no example was eligible.
    pub prec: Vec<Option<f64>>,
    pub prec_counts: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrpRow {
    pub depth: usize,
    pub crp: Option<f64>,
    pub eligible: usize,
    pub hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrpDoc {
    pub beam_k: usize,
    pub depths: Vec<CrpRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateBinDoc {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub mean_gate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateDoc {
    pub bin_width: usize,
    pub n_samples: usize,
    pub spearman: Option<f64>,
    pub bins: Vec<GateBinDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDoc {
    pub steps: u64,
    pub best_step: u64,
    pub best_val_hit10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsDoc {
    pub schema: String,
    pub run: String,
    pub config_hash: String,
    pub arch_hash: String,
    pub flags: Flags,
    pub codebook_sizes: Vec<usize>,
    pub level_sizes: Vec<usize>,
    pub n_examples: usize,
    pub hit: BTreeMap<String, f64>,
    pub ndcg: BTreeMap<String, f64>,
    pub levels: LevelsDoc,
    pub greedy_hits: usize,
    pub greedy_hit_rate: f64,
    pub crp: CrpDoc,
    pub gate: GateDoc,
    pub train: TrainDoc,
}

impl MetricsDoc {
    pub fn new(cfg: &RunConfig, level_sizes: &[usize], e: &Evaluation, train: TrainDoc) -> Self {
        MetricsDoc {
            schema: SCHEMA.into(),
            run: cfg.run_name.clone(),
            config_hash: cfg.hash(),
            arch_hash: cfg.arch_hash(),
            flags: Flags { sidtier: cfg.sidtier, shs: cfg.shs, neighbor_aug: cfg.neighbor_aug },
            codebook_sizes: cfg.codebook_sizes.to_vec(),
            level_sizes: level_sizes.to_vec(),
            n_examples: e.n_examples,
            hit: e.metrics.hit.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            ndcg: e.metrics.ndcg.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            levels: LevelsDoc {
                acc: e.levels.acc.clone(),
                prec: e.levels.prec.clone(),
                prec_counts: e.levels.prec_counts.iter().map(|&(c, n)| [c, n]).collect(),
            },
            greedy_hits: e.greedy_hits,
            greedy_hit_rate: e.greedy_hit_rate(),
            crp: CrpDoc {
                beam_k: cfg.beam_k,
                depths: (0..e.crp.crp.len())
                    .map(|d| CrpRow {
                        depth: d + 1,
                        crp: e.crp.crp[d],
                        eligible: e.crp.eligible_counts[d],
                        hits: e.crp.hit_counts[d],
                    })
                    .collect(),
            },
            gate: GateDoc {
                bin_width: e.gates.bin_width,
                n_samples: e.gates.n_samples,
                spearman: e.gates.spearman,
                bins: e
                    .gates
                    .bins
                    .iter()
                    .map(|b| GateBinDoc { lo: b.lo, hi: b.lo + e.gates.bin_width, count: b.count, mean_gate: b.mean_gate })
                    .collect(),
            },
            train,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and checks a metrics document beyond its field layout.
    pub fn validate_json(text: &str) -> Result<Self> {
        let doc: MetricsDoc = serde_json::from_str(text)?;
        let fail = |m: String| Err(GlassError::Config(format!("metrics document: {m}")));
        if doc.schema != SCHEMA {
            return fail(format!("schema {:?}", doc.schema));
        }
        let hk: Vec<String> = HIT_KS.iter().map(usize::to_string).collect();
        let nk: Vec<String> = NDCG_KS.iter().map(usize::to_string).collect();
        let mut got_h: Vec<&String> = doc.hit.keys().collect();
        let mut got_n: Vec<&String> = doc.ndcg.keys().collect();
        got_h.sort_by_key(|k| k.parse::<usize>().unwrap_or(usize::MAX));
        got_n.sort_by_key(|k| k.parse::<usize>().unwrap_or(usize::MAX));
        if got_h.iter().map(|s| s.as_str()).ne(hk.iter().map(|s| s.as_str())) {
            return fail("hit keys must be exactly 1,3,5,10,20".into());
        }
        if got_n.iter().map(|s| s.as_str()).ne(nk.iter().map(|s| s.as_str())) {
            return fail("ndcg keys must be exactly 3,5,10,20".into());
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let hits: Vec<f64> = HIT_KS.iter().map(|k| doc.hit[&k.to_string()]).collect();
        if !hits.iter().all(|&h| unit(h)) || hits.windows(2).any(|w| w[0] > w[1]) {
            return fail("hit rates must lie in [0,1] and not decrease with K".into());
        }
        if !doc.ndcg.values().all(|&v| unit(v)) {
            return fail("ndcg outside [0,1]".into());
        }
        if !doc.levels.acc.iter().all(|&v| unit(v)) || !doc.levels.prec.iter().flatten().all(|&v| unit(v)) {
            return fail("level diagnostics outside [0,1]".into());
        }
        for row in &doc.crp.depths {
            if let Some(c) = row.crp {
                if !(1.0..=doc.crp.beam_k as f64).contains(&c) {
                    return fail(format!("crp at depth {} outside [1, beam_k]", row.depth));
                }
            }
        }
        if doc.crp.depths.windows(2).any(|w| w[1].eligible > w[0].eligible) {
            return fail("eligible counts must not increase with depth".into());
        }
        if !doc.gate.bins.iter().all(|b| unit(b.mean_gate)) {
            return fail("gate means outside [0,1]".into());
        }
        Ok(doc)
    }
}

pub fn write_gate_csv(path: &Path, doc: &MetricsDoc) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path(path, e))?;
    w.write_record(["len_lo", "len_hi", "count", "mean_gate"])?;
    for b in &doc.gate.bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string(), b.mean_gate.to_string()])?;
    }
    w.flush().map_err(|e| GlassError::io(path, e))
}

pub fn write_crp_csv(path: &Path, doc: &MetricsDoc) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path(path, e))?;
    w.write_record(["depth", "crp", "eligible", "hits"])?;
    for r in &doc.crp.depths {
        w.write_record([
            r.depth.to_string(),
            r.crp.map_or(String::new(), |c| c.to_string()),
            r.eligible.to_string(),
            r.hits.to_string(),
        ])?;
    }
    w.flush().map_err(|e| GlassError::io(path, e))
}

pub(crate) fn csv_path(path: &Path, e: csv::Error) -> GlassError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GlassError::io(path, io),
        other => GlassError::Config(format!("{}: {other:?}", path.display())),
    }
}
