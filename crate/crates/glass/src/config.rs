//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! Every key has a default, unknown keys are rejected and values are
//! validated as a whole before any run starts.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use glass_core::model::{AdamWConfig, ModelConfig};
use glass_core::search::RetrievalPolicy;
use glass_core::synth::SynthConfig;
use sha2::{Digest, Sha256};

use crate::error::{GlassError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_name: String,
    pub seed: u64,
    /// Input files; empty means the artifact root's synthetic dataset.
    pub embeddings: String,
    pub interactions: String,

    pub synth_n_users: usize,
    pub synth_n_items: usize,
    pub synth_avg_len: usize,
    pub synth_n_clusters: usize,
    pub synth_long_signal_strength: f64,
    pub synth_d_emb: usize,
    pub synth_preferred_clusters: usize,
    pub synth_favorites_per_cluster: usize,
    pub synth_session_len: usize,
    pub synth_cluster_noise: f64,

    pub codebook_sizes: [usize; 3],
    pub kmeans_iters: usize,
    pub tiers: usize,
    pub tau: usize,
    pub neighbors: usize,
    pub retrieval_cap: usize,
    pub short_len: usize,

    pub d_model: usize,
    pub heads: usize,
    pub kv_dim: usize,
    pub ffn_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub tier_hidden: usize,
    pub dropout: f64,

    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub patience: usize,
    pub val_limit: usize,

    pub beam_k: usize,
    pub gate_bin_width: usize,

    pub sidtier: bool,
    pub shs: bool,
    pub neighbor_aug: bool,

    pub ablate_k0: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let m = ModelConfig::default();
        RunConfig {
            run_name: "default".into(),
            seed: 7,
            embeddings: String::new(),
            interactions: String::new(),
            synth_n_users: s.n_users,
            synth_n_items: s.n_items,
            synth_avg_len: s.avg_len,
            synth_n_clusters: s.n_clusters,
            synth_long_signal_strength: s.long_signal_strength,
            synth_d_emb: s.d_emb,
            synth_preferred_clusters: s.preferred_clusters,
            synth_favorites_per_cluster: s.favorites_per_cluster,
            synth_session_len: s.session_len,
            synth_cluster_noise: s.cluster_noise,
            codebook_sizes: [64, 128, 128],
            kmeans_iters: 50,
            tiers: m.tier_bins,
            tau: 8,
            neighbors: 3,
            retrieval_cap: 64,
            short_len: m.short_len,
            d_model: m.d,
            heads: m.heads,
            kv_dim: m.kv_dim,
            ffn_dim: m.ffn_dim,
            enc_blocks: m.enc_blocks,
            dec_blocks: m.dec_blocks,
            tier_hidden: m.tier_hidden,
            dropout: m.dropout,
            lr: 1e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            batch_size: 32,
            max_steps: 20_000,
            eval_every: 250,
            patience: 50,
            val_limit: 0,
            beam_k: 20,
            gate_bin_width: 4,
            sidtier: true,
            shs: true,
            neighbor_aug: true,
            ablate_k0: vec![32, 64],
        }
    }
}

/// Documented keys, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("run_name", "directory name of this run under runs/"),
    ("seed", "master seed for data, quantizer, initialization and batches"),
    ("embeddings", "embeddings file; empty = artifact-root synthetic data"),
    ("interactions", "interactions file; empty = artifact-root synthetic data"),
    ("synth.n_users", "synthetic users"),
    ("synth.n_items", "synthetic catalog size"),
    ("synth.avg_len", "mean synthetic sequence length"),
    ("synth.n_clusters", "embedding clusters"),
    ("synth.long_signal_strength", "probability an interaction follows the long-term mixture"),
    ("synth.d_emb", "embedding dimension"),
    ("synth.preferred_clusters", "clusters in each user's long-term mixture"),
    ("synth.favorites_per_cluster", "recurring items per preferred cluster"),
    ("synth.session_len", "interactions per session block"),
    ("synth.cluster_noise", "item offset scale around its cluster center"),
    ("codebook_sizes", "K0,K1,K2"),
    ("kmeans_iters", "Lloyd iterations per level"),
    ("tiers", "similarity tiers N"),
    ("tau", "augmentation threshold"),
    ("neighbors", "semantic neighbors k per first-level codeword"),
    ("retrieval_cap", "most recent retrieved items kept"),
    ("short_len", "short-term window length"),
    ("d_model", "token width d"),
    ("heads", "attention heads"),
    ("kv_dim", "per-head key/value width"),
    ("ffn_dim", "feed-forward hidden width"),
    ("enc_blocks", "encoder blocks"),
    ("dec_blocks", "decoder blocks"),
    ("tier_hidden", "hidden width of the tier projection"),
    ("dropout", "dropout rate"),
    ("lr", "AdamW learning rate"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("grad_clip", "global gradient-norm clip, 0 = off"),
    ("batch_size", "examples per optimizer step"),
    ("max_steps", "optimizer step limit"),
    ("eval_every", "steps between validation passes"),
    ("patience", "validation passes without Hit@10 improvement before stopping"),
    ("val_limit", "validation examples per pass, 0 = all"),
    ("beam_k", "beam width"),
    ("gate_bin_width", "retrieved-length bin width of the gate report"),
    ("sidtier", "tier token on/off"),
    ("shs", "semantic hard search on/off"),
    ("neighbor_aug", "neighbor augmentation on/off"),
    ("ablate_k0", "first-level codebook sizes for the resizing pair"),
];

/// Keys that change the parameter layout; a checkpoint only loads into a
/// configuration that agrees on all of them.
const ARCH_KEYS: &[&str] = &[
    "codebook_sizes",
    "tiers",
    "short_len",
    "d_model",
    "heads",
    "kv_dim",
    "ffn_dim",
    "enc_blocks",
    "dec_blocks",
    "tier_hidden",
    "sidtier",
    "shs",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| GlassError::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(GlassError::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run_name" => self.run_name = v.to_string(),
            "seed" => self.seed = parse(key, v)?,
            "embeddings" => self.embeddings = v.to_string(),
            "interactions" => self.interactions = v.to_string(),
            "synth.n_users" => self.synth_n_users = parse(key, v)?,
            "synth.n_items" => self.synth_n_items = parse(key, v)?,
            "synth.avg_len" => self.synth_avg_len = parse(key, v)?,
            "synth.n_clusters" => self.synth_n_clusters = parse(key, v)?,
            "synth.long_signal_strength" => self.synth_long_signal_strength = parse(key, v)?,
            "synth.d_emb" => self.synth_d_emb = parse(key, v)?,
            "synth.preferred_clusters" => self.synth_preferred_clusters = parse(key, v)?,
            "synth.favorites_per_cluster" => self.synth_favorites_per_cluster = parse(key, v)?,
            "synth.session_len" => self.synth_session_len = parse(key, v)?,
            "synth.cluster_noise" => self.synth_cluster_noise = parse(key, v)?,
            "codebook_sizes" => {
                let l = parse_list(key, v)?;
                self.codebook_sizes = l
                    .try_into()
                    .map_err(|_| GlassError::Config(format!("{key}: expected three sizes, got {v:?}")))?;
            }
            "kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            "tiers" => self.tiers = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "neighbors" => self.neighbors = parse(key, v)?,
            "retrieval_cap" => self.retrieval_cap = parse(key, v)?,
            "short_len" => self.short_len = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "kv_dim" => self.kv_dim = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "enc_blocks" => self.enc_blocks = parse(key, v)?,
            "dec_blocks" => self.dec_blocks = parse(key, v)?,
            "tier_hidden" => self.tier_hidden = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "val_limit" => self.val_limit = parse(key, v)?,
            "beam_k" => self.beam_k = parse(key, v)?,
            "gate_bin_width" => self.gate_bin_width = parse(key, v)?,
            "sidtier" => self.sidtier = parse_bool(key, v)?,
            "shs" => self.shs = parse_bool(key, v)?,
            "neighbor_aug" => self.neighbor_aug = parse_bool(key, v)?,
            "ablate_k0" => self.ablate_k0 = parse_list(key, v)?,
            _ => return Err(GlassError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let on = |b: bool| if b { "on" } else { "off" }.to_string();
        Some(match key {
            "run_name" => self.run_name.clone(),
            "seed" => self.seed.to_string(),
            "embeddings" => self.embeddings.clone(),
            "interactions" => self.interactions.clone(),
            "synth.n_users" => self.synth_n_users.to_string(),
            "synth.n_items" => self.synth_n_items.to_string(),
            "synth.avg_len" => self.synth_avg_len.to_string(),
            "synth.n_clusters" => self.synth_n_clusters.to_string(),
            "synth.long_signal_strength" => self.synth_long_signal_strength.to_string(),
            "synth.d_emb" => self.synth_d_emb.to_string(),
            "synth.preferred_clusters" => self.synth_preferred_clusters.to_string(),
            "synth.favorites_per_cluster" => self.synth_favorites_per_cluster.to_string(),
            "synth.session_len" => self.synth_session_len.to_string(),
            "synth.cluster_noise" => self.synth_cluster_noise.to_string(),
            "codebook_sizes" => join(&self.codebook_sizes),
            "kmeans_iters" => self.kmeans_iters.to_string(),
            "tiers" => self.tiers.to_string(),
            "tau" => self.tau.to_string(),
            "neighbors" => self.neighbors.to_string(),
            "retrieval_cap" => self.retrieval_cap.to_string(),
            "short_len" => self.short_len.to_string(),
            "d_model" => self.d_model.to_string(),
            "heads" => self.heads.to_string(),
            "kv_dim" => self.kv_dim.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "enc_blocks" => self.enc_blocks.to_string(),
            "dec_blocks" => self.dec_blocks.to_string(),
            "tier_hidden" => self.tier_hidden.to_string(),
            "dropout" => self.dropout.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "patience" => self.patience.to_string(),
            "val_limit" => self.val_limit.to_string(),
            "beam_k" => self.beam_k.to_string(),
            "gate_bin_width" => self.gate_bin_width.to_string(),
            "sidtier" => on(self.sidtier),
            "shs" => on(self.shs),
            "neighbor_aug" => on(self.neighbor_aug),
            "ablate_k0" => join(&self.ablate_k0),
            _ => return None,
        })
    }

    /// Parses `key = value` lines over the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GlassError::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(GlassError::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GlassError::io(path, e))?;
        RunConfig::parse_str(&text)
    }

    /// All keys as `key = value`, sorted by key.
    pub fn canonical(&self) -> String {
        let mut keys: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        keys.sort_unstable();
        keys.iter().map(|k| format!("{k} = {}\n", self.get(k).unwrap())).collect()
    }

    /// Documented file form, in key order.
    pub fn to_file_string(&self) -> String {
        KEYS.iter()
            .map(|(k, doc)| format!("# {doc}\n{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    fn hash_keys(&self, keys: &[&str]) -> String {
        let mut sorted = keys.to_vec();
        sorted.sort_unstable();
        let mut h = Sha256::new();
        for k in sorted {
            h.update(format!("{k}={}\n", self.get(k).unwrap()).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn hash(&self) -> String {
        let keys: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        self.hash_keys(&keys)
    }

    pub fn arch_hash(&self) -> String {
        self.hash_keys(ARCH_KEYS)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_users: self.synth_n_users,
            n_items: self.synth_n_items,
            avg_len: self.synth_avg_len,
            n_clusters: self.synth_n_clusters,
            long_signal_strength: self.synth_long_signal_strength,
            seed: self.seed,
            d_emb: self.synth_d_emb,
            preferred_clusters: self.synth_preferred_clusters,
            favorites_per_cluster: self.synth_favorites_per_cluster,
            session_len: self.synth_session_len,
            cluster_noise: self.synth_cluster_noise,
        }
    }

    pub fn model(&self, level_sizes: Vec<usize>) -> ModelConfig {
        ModelConfig {
            level_sizes,
            d: self.d_model,
            heads: self.heads,
            kv_dim: self.kv_dim,
            ffn_dim: self.ffn_dim,
            enc_blocks: self.enc_blocks,
            dec_blocks: self.dec_blocks,
            short_len: self.short_len,
            tier_bins: self.tiers,
            tier_hidden: self.tier_hidden,
            tier_log1p: true,
            sidtier: self.sidtier,
            shs: self.shs,
            dropout: self.dropout,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, grad_clip: self.grad_clip, ..AdamWConfig::default() }
    }

    pub fn retrieval(&self) -> Option<RetrievalPolicy> {
        self.shs.then_some(RetrievalPolicy { cap: self.retrieval_cap, augment: self.neighbor_aug, tau: self.tau })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GlassError::Config(m));
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) || self.run_name.starts_with('.') {
            return bad(format!("run_name {:?} is not a plain directory name", self.run_name));
        }
        for (k, v) in [
            ("kmeans_iters", self.kmeans_iters),
            ("tiers", self.tiers),
            ("neighbors", self.neighbors),
            ("retrieval_cap", self.retrieval_cap),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every as usize),
            ("patience", self.patience),
            ("beam_k", self.beam_k),
            ("gate_bin_width", self.gate_bin_width),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.codebook_sizes.iter().any(|&s| s < 2) {
            return bad("codebook sizes must be at least 2".into());
        }
        if self.ablate_k0.iter().any(|&s| s < 2) {
            return bad("ablate_k0 sizes must be at least 2".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        if self.neighbor_aug && !self.shs {
            return bad("neighbor_aug requires shs".into());
        }
        if self.embeddings.is_empty() != self.interactions.is_empty() {
            return bad("set both embeddings and interactions, or neither".into());
        }
        self.model(self.codebook_sizes.to_vec()).validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for (k, _) in KEYS {
            let mut other = RunConfig { seed: 99, ..RunConfig::default() };
            other.set(k, &cfg.get(k).unwrap()).unwrap();
            assert_eq!(other.get(k), cfg.get(k), "{k}");
        }
        assert_eq!(RunConfig::parse_str(&cfg.to_file_string()).unwrap(), cfg);
    }
}
