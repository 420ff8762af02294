//! Encoder–decoder generator over Semantic-ID tokens.
//!
//! The encoder reads the short-term history as SID tokens, optionally
//! followed by one projected tier-feature token. Each decoder block runs
//! causal self-attention, then two parallel cross-attentions: one over the
//! encoder output and one over the retrieved long-history tokens. The two
//! views are blended by an elementwise sigmoid gate before the FFN.
//! Decoder row 0 (the begin-of-sequence position) never sees retrieval, so
//! teacher-forced training matches step-by-step decoding.

mod train;
mod vocab;

pub use train::{AdamW, AdamWConfig, TrainExample};
pub use vocab::TokenVocabulary;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{lerp_bounded, sigmoid, CeTarget, Graph, NodeId, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Codebook sizes, plus a suffix level when collisions exist.
    pub level_sizes: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub kv_dim: usize,
    pub ffn_dim: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub short_len: usize,
    pub tier_bins: usize,
    pub tier_hidden: usize,
    /// log1p-scale tier counts before the projection MLP.
    pub tier_log1p: bool,
    pub sidtier: bool,
    pub shs: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            level_sizes: vec![64, 128, 128],
            d: 96,
            heads: 8,
            kv_dim: 32,
            ffn_dim: 384,
            enc_blocks: 4,
            dec_blocks: 4,
            short_len: 50,
            tier_bins: 8,
            tier_hidden: 256,
            tier_log1p: true,
            sidtier: true,
            shs: true,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn k0(&self) -> usize {
        self.level_sizes[0]
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    /// Encoder positions: three tokens per short item plus the tier token.
    pub fn max_encoder_len(&self) -> usize {
        3 * self.short_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(3..=4).contains(&self.level_sizes.len()) {
            return bad(format!("expected 3 or 4 token levels, got {}", self.level_sizes.len()));
        }
        if self.level_sizes.iter().any(|&s| s == 0) {
            return bad("level sizes must be positive".into());
        }
        for (name, v) in [
            ("d", self.d),
            ("heads", self.heads),
            ("kv_dim", self.kv_dim),
            ("ffn_dim", self.ffn_dim),
            ("short_len", self.short_len),
            ("tier_bins", self.tier_bins),
            ("tier_hidden", self.tier_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d % self.heads != 0 {
            return bad(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Encoder input for one example, plus the retrieved tokens the decoder
/// cross-attends to (empty when retrieval is off or found nothing).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub short_tokens: Vec<usize>,
    pub tier_flat: Option<Vec<f64>>,
    pub retrieved_tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ret: Option<AttnIds>,
    gate: Option<ParamId>,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Debug, Clone)]
struct Ids {
    tok_emb: ParamId,
    out_bias: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    tier: Option<FfnIds>,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    dec_ln: LnIds,
}

/// Model configuration, vocabulary and all trainable tensors.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    vocab: TokenVocabulary,
    store: ParamStore,
    ids: Ids,
}

struct Init<'r> {
    store: ParamStore,
    rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64, decay: bool) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        self.store.add(name, Tensor::from_vec(rows, cols, data).unwrap(), decay)
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.normal(name, fan_in, fan_out, 1.0 / libm::sqrt(fan_in as f64), true)
    }

    fn constant(&mut self, name: String, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Tensor::from_vec(1, cols, vec![v; cols]).unwrap(), false)
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds { g: self.constant(format!("{prefix}.g"), d, 1.0), b: self.constant(format!("{prefix}.b"), d, 0.0) }
    }

    fn attn(&mut self, prefix: &str, d: usize, hk: usize) -> AttnIds {
        AttnIds {
            wq: self.linear(format!("{prefix}.wq"), d, hk),
            wk: self.linear(format!("{prefix}.wk"), d, hk),
            wv: self.linear(format!("{prefix}.wv"), d, hk),
            wo: self.linear(format!("{prefix}.wo"), hk, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> FfnIds {
        FfnIds {
            w1: self.linear(format!("{prefix}.w1"), d_in, hidden),
            b1: self.constant(format!("{prefix}.b1"), hidden, 0.0),
            w2: self.linear(format!("{prefix}.w2"), hidden, d_out),
            b2: self.constant(format!("{prefix}.b2"), d_out, 0.0),
        }
    }
}

/// Dropout masks drawn from a seeded stream; `None` means evaluation mode.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Dropout { rate, rng: if rate > 0.0 { Some(ChaCha8Rng::seed_from_u64(seed)) } else { None } }
    }

    fn apply(&mut self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_mut() else { return x };
        let keep = 1.0 - self.rate;
        let n = g.value(x).data().len();
        let mask = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        g.dropout(x, mask)
    }
}

/// Decoder output: final hidden rows plus the per-layer gate nodes (absent
/// when no decoder row had retrieval).
pub struct DecoderOut {
    pub hidden: NodeId,
    pub gates: Vec<NodeId>,
}

/// One decoding step evaluated outside training.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Full-vocabulary logits, `-inf` outside the current level's range.
    pub logits: Vec<f64>,
    pub level: usize,
    /// Mean gate over layers and dimensions at the last row; 0 without retrieval.
    pub mean_gate: f64,
}

impl ModelParams {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = TokenVocabulary::new(&config.level_sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: ParamStore::new(), rng: &mut rng };
        let d = config.d;
        let hk = config.heads * config.kv_dim;
        let emb_std = 1.0 / libm::sqrt(d as f64);
        let tok_emb = init.normal("tok_emb".into(), vocab.len(), d, emb_std, false);
        let out_bias = init.constant("out_bias".into(), vocab.len(), 0.0);
        let enc_pos = init.normal("enc_pos".into(), config.max_encoder_len(), d, 0.1 * emb_std, false);
        let dec_pos = init.normal("dec_pos".into(), config.levels(), d, 0.1 * emb_std, false);
        let tier = config
            .sidtier
            .then(|| init.ffn("tier", config.k0() * config.tier_bins, config.tier_hidden, d));
        let enc = (0..config.enc_blocks)
            .map(|l| EncLayer {
                ln1: init.ln(&format!("enc.{l}.ln1"), d),
                attn: init.attn(&format!("enc.{l}.attn"), d, hk),
                ln2: init.ln(&format!("enc.{l}.ln2"), d),
                ffn: init.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim, d),
            })
            .collect();
        let dec = (0..config.dec_blocks)
            .map(|l| DecLayer {
                ln1: init.ln(&format!("dec.{l}.ln1"), d),
                self_attn: init.attn(&format!("dec.{l}.self"), d, hk),
                ln2: init.ln(&format!("dec.{l}.ln2"), d),
                cross: init.attn(&format!("dec.{l}.cross"), d, hk),
                ret: config.shs.then(|| init.attn(&format!("dec.{l}.ret"), d, hk)),
                gate: config.shs.then(|| init.linear(format!("dec.{l}.gate"), 2 * d, d)),
                ln3: init.ln(&format!("dec.{l}.ln3"), d),
                ffn: init.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim, d),
            })
            .collect();
        let dec_ln = init.ln("dec.ln_f", d);
        let store = init.store;
        Ok(ModelParams {
            config,
            vocab,
            store,
            ids: Ids { tok_emb, out_bias, enc_pos, dec_pos, tier, enc, dec, dec_ln },
        })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match the
    /// layout implied by `config` exactly.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = ModelParams::new(config, 0)?;
        let expected = model.store.entries();
        if expected.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, configuration expects {}",
                store.len(),
                expected.len()
            )));
        }
        for (e, s) in expected.iter().zip(store.entries()) {
            if e.name != s.name || e.value.shape() != s.value.shape() {
                return Err(Error::Config(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    e.name,
                    e.value.shape(),
                    s.name,
                    s.value.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &TokenVocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Ids of the per-layer gate weights, in layer order.
    pub fn gate_params(&self) -> Vec<ParamId> {
        self.ids.dec.iter().filter_map(|l| l.gate).collect()
    }

    fn linear(&self, g: &mut Graph<'_>, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let wn = g.param(w);
        let y = g.matmul(x, wn);
        match b {
            Some(b) => {
                let bn = g.param(b);
                g.add_row(y, bn)
            }
            None => y,
        }
    }

    fn layer_norm(&self, g: &mut Graph<'_>, x: NodeId, ln: LnIds) -> NodeId {
        let ga = g.param(ln.g);
        let be = g.param(ln.b);
        g.layer_norm(x, ga, be)
    }

    fn ffn(&self, g: &mut Graph<'_>, x: NodeId, f: FfnIds) -> NodeId {
        let h = self.linear(g, x, f.w1, Some(f.b1));
        let h = g.gelu(h);
        self.linear(g, h, f.w2, Some(f.b2))
    }

    fn attention(&self, g: &mut Graph<'_>, a: AttnIds, xq: NodeId, xkv: NodeId, causal: bool) -> NodeId {
        let q = self.linear(g, xq, a.wq, None);
        let k = self.linear(g, xkv, a.wk, None);
        let v = self.linear(g, xkv, a.wv, None);
        let dk = self.config.kv_dim;
        let scale = 1.0 / libm::sqrt(dk as f64);
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.cols(q, h * dk, dk);
            let kh = g.cols(k, h * dk, dk);
            let vh = g.cols(v, h * dk, dk);
            let s = g.matmul_bt(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax(s, causal);
            heads.push(g.matmul(p, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.linear(g, cat, a.wo, None)
    }

    /// Projects a flat tier feature (1 × K_0·N) into token space (1 × d).
    pub fn project_tier(&self, g: &mut Graph<'_>, flat: NodeId) -> Result<NodeId> {
        let tier = self.ids.tier.ok_or_else(|| Error::Config("tier projection is disabled".into()))?;
        let want = self.config.k0() * self.config.tier_bins;
        if g.value(flat).shape() != (1, want) {
            return Err(Error::Config(format!(
                "tier feature has shape {:?}, expected (1, {want})",
                g.value(flat).shape()
            )));
        }
        let x = if self.config.tier_log1p { g.log1p(flat) } else { flat };
        Ok(self.ffn(g, x, tier))
    }

    /// Encoder over the short-term tokens, with the tier token appended last.
    pub fn encode_short(&self, g: &mut Graph<'_>, input: &ModelInput, drop: &mut Dropout) -> Result<NodeId> {
        let use_tier = self.config.sidtier && input.tier_flat.is_some();
        let n = input.short_tokens.len() + use_tier as usize;
        if n == 0 {
            return Err(Error::Input("nothing to encode: no short history and no tier token".into()));
        }
        if n > self.config.max_encoder_len() {
            return Err(Error::Input(format!(
                "{n} encoder positions exceed the maximum {}",
                self.config.max_encoder_len()
            )));
        }
        if let Some(&t) = input.short_tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::Input(format!("token {t} outside the vocabulary")));
        }
        let emb = g.param(self.ids.tok_emb);
        let mut parts = Vec::new();
        if !input.short_tokens.is_empty() {
            parts.push(g.gather(emb, &input.short_tokens));
        }
        if use_tier {
            let flat = g.input(Tensor::row_vector(input.tier_flat.clone().unwrap()));
            parts.push(self.project_tier(g, flat)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let pos_table = g.param(self.ids.enc_pos);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather(pos_table, &positions);
        let mut h = g.add(x, pos);
        for layer in &self.ids.enc {
            let a = self.layer_norm(g, h, layer.ln1);
            let a = self.attention(g, layer.attn, a, a, false);
            let a = drop.apply(g, a);
            h = g.add(h, a);
            let f = self.layer_norm(g, h, layer.ln2);
            let f = self.ffn(g, f, layer.ffn);
            let f = drop.apply(g, f);
            h = g.add(h, f);
        }
        Ok(h)
    }

    /// Decoder over `prefix` (starting with BOS). Retrieval tokens feed the
    /// second cross-attention for rows 1.. only; with no retrieval the gate
    /// is skipped and the block reduces to a single cross-attention decoder.
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        enc: NodeId,
        prefix: &[usize],
        retrieved: &[usize],
        drop: &mut Dropout,
    ) -> Result<DecoderOut> {
        if prefix.is_empty() || prefix[0] != self.vocab.bos() {
            return Err(Error::State("decoder input must start with the BOS token".into()));
        }
        if prefix.len() > self.config.levels() {
            return Err(Error::State(format!(
                "decoder prefix of length {} exceeds {} levels",
                prefix.len(),
                self.config.levels()
            )));
        }
        let emb = g.param(self.ids.tok_emb);
        let x = g.gather(emb, prefix);
        let pos_table = g.param(self.ids.dec_pos);
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let pos = g.gather(pos_table, &positions);
        let mut h = g.add(x, pos);

        let retrieval_on = self.config.shs && !retrieved.is_empty() && prefix.len() > 1;
        let e_ret = if retrieval_on { Some(g.gather(emb, retrieved)) } else { None };
        let active: Vec<bool> = (0..prefix.len()).map(|r| r > 0).collect();
        let mut gates = Vec::new();

        for layer in &self.ids.dec {
            let a = self.layer_norm(g, h, layer.ln1);
            let a = self.attention(g, layer.self_attn, a, a, true);
            let a = drop.apply(g, a);
            let x = g.add(h, a);
            let q = self.layer_norm(g, x, layer.ln2);
            let z_short = self.attention(g, layer.cross, q, enc, false);
            let z = match (e_ret, layer.ret, layer.gate) {
                (Some(er), Some(ret), Some(wg)) => {
                    let z_ret = self.attention(g, ret, q, er, false);
                    let both = g.concat_cols(&[z_short, z_ret]);
                    let w = g.param(wg);
                    let logits = g.matmul(both, w);
                    let gate = g.sigmoid(logits);
                    gates.push(gate);
                    g.gate_fuse(z_short, z_ret, gate, active.clone())
                }
                _ => z_short,
            };
            let z = drop.apply(g, z);
            h = g.add(x, z);
            let f = self.layer_norm(g, h, layer.ln3);
            let f = self.ffn(g, f, layer.ffn);
            let f = drop.apply(g, f);
            h = g.add(h, f);
        }
        let hidden = self.layer_norm(g, h, self.ids.dec_ln);
        Ok(DecoderOut { hidden, gates })
    }

    /// Full-vocabulary logits for every decoder row (output tied to the token table).
    pub fn logits(&self, g: &mut Graph<'_>, hidden: NodeId) -> NodeId {
        let emb = g.param(self.ids.tok_emb);
        let l = g.matmul_bt(hidden, emb);
        let b = g.param(self.ids.out_bias);
        g.add_row(l, b)
    }

    /// Summed next-token cross-entropy under teacher forcing.
    pub fn example_loss(&self, g: &mut Graph<'_>, ex: &TrainExample, drop: &mut Dropout) -> Result<NodeId> {
        let levels = self.config.levels();
        if ex.target.len() != levels {
            return Err(Error::Input(format!("target has {} tokens, model has {levels} levels", ex.target.len())));
        }
        for (q, &t) in ex.target.iter().enumerate() {
            if !self.vocab.level_range(q).contains(&t) {
                return Err(Error::Input(format!("target token {t} is not a level-{q} token")));
            }
        }
        let enc = self.encode_short(g, &ex.input, drop)?;
        let mut prefix = vec![self.vocab.bos()];
        prefix.extend_from_slice(&ex.target[..levels - 1]);
        let out = self.decode(g, enc, &prefix, &ex.input.retrieved_tokens, drop)?;
        let logits = self.logits(g, out.hidden);
        let targets = ex
            .target
            .iter()
            .enumerate()
            .map(|(q, &token)| {
                let r = self.vocab.level_range(q);
                CeTarget { token, lo: r.start, hi: r.end }
            })
            .collect();
        Ok(g.cross_entropy(logits, targets))
    }

    /// Teacher-forced logits (levels × vocab), evaluation mode.
    pub fn teacher_forced_logits(&self, ex: &TrainExample) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let mut drop = Dropout::off();
        let enc = self.encode_short(&mut g, &ex.input, &mut drop)?;
        let levels = self.config.levels();
        let mut prefix = vec![self.vocab.bos()];
        prefix.extend_from_slice(&ex.target[..levels - 1]);
        let out = self.decode(&mut g, enc, &prefix, &ex.input.retrieved_tokens, &mut drop)?;
        let l = self.logits(&mut g, out.hidden);
        Ok(g.value(l).clone())
    }

    /// Encoder output for inference.
    pub fn encode_user(&self, input: &ModelInput) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let enc = self.encode_short(&mut g, input, &mut Dropout::off())?;
        Ok(g.value(enc).clone())
    }

    /// Next-level logits after `prefix` (BOS first), masked to that level.
    pub fn decode_step(&self, enc: &Tensor, prefix: &[usize], retrieved: &[usize]) -> Result<StepOutput> {
        let level = prefix.len().wrapping_sub(1);
        if prefix.is_empty() || level >= self.config.levels() {
            return Err(Error::State(format!("no level follows a prefix of length {}", prefix.len())));
        }
        let mut g = Graph::new(&self.store);
        let e = g.input(enc.clone());
        let out = self.decode(&mut g, e, prefix, retrieved, &mut Dropout::off())?;
        let last = prefix.len() - 1;
        let h = g.gather(out.hidden, &[last]);
        let l = self.logits(&mut g, h);
        let range = self.vocab.level_range(level);
        let logits = g
            .value(l)
            .data()
            .iter()
            .enumerate()
            .map(|(t, &v)| if range.contains(&t) { v } else { f64::NEG_INFINITY })
            .collect();
        let mean_gate = if out.gates.is_empty() || last == 0 {
            0.0
        } else {
            let total: f64 = out.gates.iter().map(|&gn| g.value(gn).row(last).iter().sum::<f64>()).sum();
            total / (out.gates.len() * self.config.d) as f64
        };
        Ok(StepOutput { logits, level, mean_gate })
    }
}

/// Gated fusion of two views: `g = σ([Z_short ; Z_ret]·W_g)` elementwise and
/// `Z_context = (1-g)⊙Z_short + g⊙Z_ret`. Returns `(Z_context, g)`.
pub fn gate_fuse(z_short: &Tensor, z_ret: &Tensor, w_g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (rows, d) = z_short.shape();
    if z_ret.shape() != (rows, d) {
        return Err(Error::Shape(format!("Z_short {:?} vs Z_ret {:?}", z_short.shape(), z_ret.shape())));
    }
    if w_g.shape() != (2 * d, d) {
        return Err(Error::Shape(format!("W_g is {:?}, expected ({}, {d})", w_g.shape(), 2 * d)));
    }
    let mut both = Tensor::zeros(rows, 2 * d);
    for r in 0..rows {
        both.row_mut(r)[..d].copy_from_slice(z_short.row(r));
        both.row_mut(r)[d..].copy_from_slice(z_ret.row(r));
    }
    let mut gate = both.matmul(w_g);
    gate.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut z = Tensor::zeros(rows, d);
    for ((o, (&s, &r)), &gv) in z.data_mut().iter_mut().zip(z_short.data().iter().zip(z_ret.data())).zip(gate.data()) {
        *o = lerp_bounded(s, r, gv);
    }
    Ok((z, gate))
}
