//! On-disk formats: embeddings, interactions, quantizer and checkpoint files.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! file reloads bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use glass_core::corpus::{Corpus, DropReport, InteractionSequence, Item, ItemId, UserId};
use glass_core::graph::ParamStore;
use glass_core::model::{AdamW, ModelParams};
use glass_core::quantizer::{Codebook, QuantizerModel, SemanticId, LEVELS};
use glass_core::tensor::Tensor;
use glass_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{GlassError, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GlassError::io(path, e))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GlassError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| GlassError::io(path, e))
}

fn format_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> GlassError {
    GlassError::Core(CoreError::Format(format!("{}:{line}: {msg}", path.display())))
}

fn push_row(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v}").unwrap();
    }
    out.push('\n');
}

// ---------------------------------------------------------------- embeddings

pub fn write_embeddings(path: &Path, items: &[Item]) -> Result<()> {
    let d = items.first().map_or(0, |i| i.embedding.len());
    let mut out = format!("{d} {}\n", items.len());
    for item in items {
        write!(out, "{}", item.id.0).unwrap();
        for v in &item.embedding {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Item>> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| format_err(path, 1, "missing header"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    let (d, n) = match head.as_slice() {
        [d, n] => match (d.parse::<usize>(), n.parse::<usize>()) {
            (Ok(d), Ok(n)) if d > 0 => (d, n),
            _ => return Err(format_err(path, 1, "header must be `d_emb n_items`")),
        },
        _ => return Err(format_err(path, 1, "header must be `d_emb n_items`")),
    };
    let mut items = Vec::with_capacity(n);
    for (i, line) in lines {
        let mut fields = line.split_whitespace();
        let id: u64 = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|_| format_err(path, i + 1, "item id is not an integer"))?;
        let embedding = fields
            .map(|f| f.parse::<f64>().map_err(|_| format_err(path, i + 1, format!("bad number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if embedding.len() != d {
            return Err(format_err(path, i + 1, format!("row has {} values, header says {d}", embedding.len())));
        }
        items.push(Item { id: ItemId(id), embedding });
    }
    if items.len() != n {
        return Err(format_err(path, 1, format!("header announces {n} items, file holds {}", items.len())));
    }
    Ok(items)
}

// -------------------------------------------------------------- interactions

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InteractionLine {
    user: u64,
    items: Vec<u64>,
}

pub fn write_interactions(path: &Path, sequences: &[InteractionSequence]) -> Result<()> {
    let mut out = String::new();
    for s in sequences {
        let line = InteractionLine { user: s.user.0, items: s.items.iter().map(|i| i.0).collect() };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_interactions(path: &Path) -> Result<Vec<InteractionSequence>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: InteractionLine = serde_json::from_str(l).map_err(|e| format_err(path, i + 1, e))?;
            Ok(InteractionSequence { user: UserId(r.user), items: r.items.into_iter().map(ItemId).collect() })
        })
        .collect()
}

/// Reads both files and builds a corpus, logging dropped sequences.
pub fn ingest(embeddings: &Path, interactions: &Path) -> Result<(Corpus, DropReport)> {
    let items = read_embeddings(embeddings)?;
    let seqs = read_interactions(interactions)?;
    let (corpus, report) = Corpus::new(items, seqs)?;
    if report.unresolved + report.too_short > 0 {
        log::warn!(
            "dropped {} sequences with unknown items and {} shorter than 2",
            report.unresolved,
            report.too_short
        );
    }
    Ok((corpus, report))
}

pub fn emit(corpus: &Corpus, embeddings: &Path, interactions: &Path) -> Result<()> {
    write_embeddings(embeddings, corpus.items())?;
    write_interactions(interactions, corpus.sequences())
}

// ------------------------------------------------------------ line reader

struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Lines { path, inner: text.lines().enumerate(), line: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> GlassError {
        GlassError::parse(self.path, self.line, msg)
    }

    fn next(&mut self) -> Result<&'a str> {
        let (i, l) = self.inner.next().ok_or_else(|| GlassError::parse(self.path, self.line + 1, "unexpected end of file"))?;
        self.line = i + 1;
        Ok(l)
    }

    /// Next line split as `keyword rest...`; the keyword must match.
    fn keyed(&mut self, keyword: &str) -> Result<Vec<&'a str>> {
        let l = self.next()?;
        let mut f = l.split_whitespace();
        if f.next() != Some(keyword) {
            return Err(self.err(format!("expected `{keyword}`")));
        }
        Ok(f.collect())
    }

    fn value<T: FromStr>(&mut self, keyword: &str) -> Result<T> {
        let f = self.keyed(keyword)?;
        match f.as_slice() {
            [v] => v.parse().map_err(|_| self.err(format!("bad value for `{keyword}`"))),
            _ => Err(self.err(format!("`{keyword}` takes one value"))),
        }
    }

    fn numbers<T: FromStr>(&self, fields: &[&str]) -> Result<Vec<T>> {
        fields.iter().map(|f| f.parse().map_err(|_| self.err(format!("bad number {f:?}")))).collect()
    }

    fn row(&mut self, len: usize) -> Result<Vec<f64>> {
        let l = self.next()?;
        let f: Vec<&str> = l.split_whitespace().collect();
        let v = self.numbers(&f)?;
        if v.len() != len {
            return Err(self.err(format!("expected {len} values, found {}", v.len())));
        }
        Ok(v)
    }
}

// ----------------------------------------------------------------- quantizer

const QUANTIZER_MAGIC: &str = "glass-quantizer 1";

pub fn write_quantizer(path: &Path, q: &QuantizerModel) -> Result<()> {
    let d = q.d_emb();
    let mut out = format!("{QUANTIZER_MAGIC}\n");
    let sizes = q.sizes();
    writeln!(out, "sizes {} {} {}", sizes[0], sizes[1], sizes[2]).unwrap();
    writeln!(out, "d_emb {d}").unwrap();
    for cb in &q.codebooks {
        writeln!(out, "codebook {} {}", cb.level, cb.size()).unwrap();
        for v in &cb.vectors {
            push_row(&mut out, v);
        }
    }
    writeln!(out, "assignments {}", q.assignments.len()).unwrap();
    for (id, sid) in &q.assignments {
        writeln!(out, "{} {} {} {} {}", id.0, sid.codes[0], sid.codes[1], sid.codes[2], sid.suffix).unwrap();
    }
    writeln!(out, "prototypes {}", q.prototypes.len()).unwrap();
    for (a, p) in &q.prototypes {
        write!(out, "{a} ").unwrap();
        push_row(&mut out, p);
    }
    writeln!(out, "neighbors {}", q.neighbor_dict.len()).unwrap();
    for (a, n) in &q.neighbor_dict {
        write!(out, "{a}").unwrap();
        for x in n {
            write!(out, " {x}").unwrap();
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_quantizer(path: &Path) -> Result<QuantizerModel> {
    let text = read(path)?;
    let mut r = Lines::new(path, &text);
    if r.next()? != QUANTIZER_MAGIC {
        return Err(r.err("not a quantizer file"));
    }
    let sizes: Vec<usize> = {
        let f = r.keyed("sizes")?;
        r.numbers(&f)?
    };
    if sizes.len() != LEVELS {
        return Err(r.err("expected three codebook sizes"));
    }
    let d: usize = r.value("d_emb")?;
    let mut codebooks = Vec::with_capacity(LEVELS);
    for (level, &size) in sizes.iter().enumerate() {
        let f = r.keyed("codebook")?;
        if r.numbers::<usize>(&f)? != [level, size] {
            return Err(r.err(format!("expected codebook {level} {size}")));
        }
        let vectors = (0..size).map(|_| r.row(d)).collect::<Result<Vec<_>>>()?;
        codebooks.push(Codebook { level, vectors });
    }
    let n: usize = r.value("assignments")?;
    let mut assignments = BTreeMap::new();
    for _ in 0..n {
        let l = r.next()?;
        let f: Vec<u64> = r.numbers(&l.split_whitespace().collect::<Vec<_>>())?;
        let [id, c0, c1, c2, suffix] = f[..] else {
            return Err(r.err("assignment needs id, three codes and suffix"));
        };
        let codes = [c0 as usize, c1 as usize, c2 as usize];
        if codes.iter().zip(&sizes).any(|(c, s)| c >= s) {
            return Err(r.err("code out of codebook range"));
        }
        assignments.insert(ItemId(id), SemanticId { codes, suffix: suffix as usize });
    }
    let n: usize = r.value("prototypes")?;
    let mut prototypes = BTreeMap::new();
    for _ in 0..n {
        let l = r.next()?;
        let (a, rest) = l.split_once(' ').ok_or_else(|| r.err("prototype row"))?;
        let a: usize = a.parse().map_err(|_| r.err("prototype codeword"))?;
        let v: Vec<f64> = r.numbers(&rest.split_whitespace().collect::<Vec<_>>())?;
        if v.len() != d {
            return Err(r.err("prototype width"));
        }
        prototypes.insert(a, v);
    }
    let n: usize = r.value("neighbors")?;
    let mut neighbor_dict = BTreeMap::new();
    for _ in 0..n {
        let l = r.next()?;
        let f: Vec<usize> = r.numbers(&l.split_whitespace().collect::<Vec<_>>())?;
        let (a, rest) = f.split_first().ok_or_else(|| r.err("empty neighbor row"))?;
        neighbor_dict.insert(*a, rest.to_vec());
    }
    Ok(QuantizerModel { codebooks, assignments, prototypes, neighbor_dict })
}

// ---------------------------------------------------------------- checkpoint

const CHECKPOINT_MAGIC: &str = "glass-checkpoint 1";

/// Everything needed to evaluate a model or resume its training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: ModelParams,
    pub opt: AdamW,
    pub best_step: u64,
    pub best_val_hit10: f64,
    pub bad_evals: usize,
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut out = format!("{CHECKPOINT_MAGIC}\n");
    writeln!(out, "config_hash {}", ck.config.hash()).unwrap();
    writeln!(out, "arch_hash {}", ck.config.arch_hash()).unwrap();
    let cfg = ck.config.canonical();
    writeln!(out, "config {}", cfg.lines().count()).unwrap();
    out.push_str(&cfg);
    let levels: Vec<String> = ck.model.config().level_sizes.iter().map(usize::to_string).collect();
    writeln!(out, "level_sizes {}", levels.join(" ")).unwrap();
    writeln!(out, "step {}", ck.opt.step).unwrap();
    writeln!(out, "best_step {}", ck.best_step).unwrap();
    writeln!(out, "best_val_hit10 {}", ck.best_val_hit10).unwrap();
    writeln!(out, "bad_evals {}", ck.bad_evals).unwrap();
    let entries = ck.model.store().entries();
    writeln!(out, "tensors {}", entries.len()).unwrap();
    for (i, e) in entries.iter().enumerate() {
        writeln!(out, "tensor {} {} {} {}", e.name, e.value.rows(), e.value.cols(), e.decay as u8).unwrap();
        push_row(&mut out, e.value.data());
        push_row(&mut out, ck.opt.m[i].data());
        push_row(&mut out, ck.opt.v[i].data());
    }
    write_file(path, &out)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = read(path)?;
    let mut r = Lines::new(path, &text);
    if r.next()? != CHECKPOINT_MAGIC {
        return Err(r.err("not a checkpoint file"));
    }
    let config_hash: String = r.value("config_hash")?;
    let arch_hash: String = r.value("arch_hash")?;
    let n: usize = r.value("config")?;
    let mut cfg_text = String::new();
    for _ in 0..n {
        cfg_text.push_str(r.next()?);
        cfg_text.push('\n');
    }
    let config = RunConfig::parse_str(&cfg_text)?;
    if config.hash() != config_hash || config.arch_hash() != arch_hash {
        return Err(r.err("stored configuration does not match its hash"));
    }
    let level_sizes: Vec<usize> = {
        let f = r.keyed("level_sizes")?;
        r.numbers(&f)?
    };
    let step: u64 = r.value("step")?;
    let best_step: u64 = r.value("best_step")?;
    let best_val_hit10: f64 = r.value("best_val_hit10")?;
    let bad_evals: usize = r.value("bad_evals")?;
    let n: usize = r.value("tensors")?;
    let mut store = ParamStore::new();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        let f = r.keyed("tensor")?;
        let [name, rows, cols, decay] = f[..] else {
            return Err(r.err("tensor header needs name, rows, cols, decay"));
        };
        let rows: usize = rows.parse().map_err(|_| r.err("rows"))?;
        let cols: usize = cols.parse().map_err(|_| r.err("cols"))?;
        let decay = decay == "1";
        let mut t = || -> Result<Tensor> { Ok(Tensor::from_vec(rows, cols, r.row(rows * cols)?)?) };
        let value = t()?;
        m.push(t()?);
        v.push(t()?);
        store.add(name, value, decay);
    }
    let model = ModelParams::from_store(config.model(level_sizes), store)?;
    let opt = AdamW { config: config.optimizer(), m, v, step };
    Ok(Checkpoint { config, model, opt, best_step, best_val_hit10, bad_evals })
}
