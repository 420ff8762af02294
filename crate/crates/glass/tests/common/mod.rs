#![allow(dead_code)]

use glass::runner::Artifacts;
use glass::RunConfig;

/// Seconds-scale end-to-end configuration.
pub fn tiny_config(name: &str) -> RunConfig {
    let text = format!(
        "run_name = {name}
synth.n_users = 12
synth.n_items = 60
synth.avg_len = 40
synth.n_clusters = 4
synth.d_emb = 8
codebook_sizes = 4,4,4
kmeans_iters = 10
tiers = 4
retrieval_cap = 8
tau = 3
neighbors = 2
short_len = 4
d_model = 8
heads = 2
kv_dim = 4
ffn_dim = 16
enc_blocks = 1
dec_blocks = 1
tier_hidden = 8
lr = 0.01
batch_size = 4
max_steps = 20
eval_every = 10
patience = 100
beam_k = 20
ablate_k0 = 2
"
    );
    RunConfig::parse_str(&text).unwrap()
}

pub fn artifacts() -> (tempfile::TempDir, Artifacts) {
    let dir = tempfile::tempdir().unwrap();
    let art = Artifacts::new(dir.path());
    (dir, art)
}
