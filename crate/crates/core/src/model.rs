//! Tiny encoder-decoder transformer over a named parameter registry.
//!
//! The registry distinguishes prunable weight matrices (rank 2) from biases
//! and layer-norm parameters, and records per-matrix fan-in/fan-out. Matrices
//! are initialized uniformly in [-a, a] with a = sqrt(6 / (fan_in + fan_out))
//! from the config seed, so identical seeds give bit-identical registries.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tasks::{Batch, BOS_TOKEN};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Additive attention-mask value for future positions.
const CAUSAL_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size < 2 {
            problems.push("vocab_size must be at least 2 (BOS plus data tokens)".to_string());
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One named parameter. `fan_in`/`fan_out` are meaningful only for prunable
/// entries (weight matrices); biases and norm parameters carry 0/0.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub prunable: bool,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Ordered, uniquely named parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_matrix(
        &mut self,
        name: &str,
        tensor: Tensor,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<()> {
        if tensor.rank() < 2 {
            return Err(Error::Contract(format!(
                "prunable parameter '{name}' must be a matrix, got rank {}",
                tensor.rank()
            )));
        }
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::Contract(format!(
                "prunable parameter '{name}' needs positive fan_in/fan_out"
            )));
        }
        self.push(ParamEntry {
            name: name.to_string(),
            tensor,
            prunable: true,
            fan_in,
            fan_out,
        })
    }

    pub fn add_bias(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if tensor.rank() != 1 {
            return Err(Error::Contract(format!(
                "non-prunable parameter '{name}' must be rank 1, got rank {}",
                tensor.rank()
            )));
        }
        self.push(ParamEntry {
            name: name.to_string(),
            tensor,
            prunable: false,
            fan_in: 0,
            fan_out: 0,
        })
    }

    pub fn push(&mut self, entry: ParamEntry) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::Contract(format!(
                "duplicate parameter name '{}'",
                entry.name
            )));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn entry_at(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_at_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn entries(&self) -> std::slice::Iter<'_, ParamEntry> {
        self.entries.iter()
    }

    pub fn entries_mut(&mut self) -> std::slice::IterMut<'_, ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn prunable_entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.prunable)
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn prunable_params(&self) -> usize {
        self.prunable_entries().map(|e| e.tensor.numel()).sum()
    }

    /// Zero fraction of prunable entries; the measured sparsity.
    pub fn measured_sparsity(&self) -> f64 {
        let total = self.prunable_params();
        if total == 0 {
            return 0.0;
        }
        let zeros: usize = self
            .prunable_entries()
            .map(|e| e.tensor.values().iter().filter(|&&v| v == 0.0).count())
            .sum();
        zeros as f64 / total as f64
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    pub fn bitwise_eq(&self, other: &ParamRegistry) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.prunable == b.prunable
                    && a.fan_in == b.fan_in
                    && a.fan_out == b.fan_out
                    && a.tensor.bitwise_eq(&b.tensor)
            })
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Build the full parameter inventory for the configured architecture.
pub fn build_model(cfg: &ModelConfig) -> Result<ParamRegistry> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reg = ParamRegistry::new();
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let ff = cfg.d_ff;

    let matrix = |reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize| -> Result<()> {
        let bound = glorot_bound(rows, cols);
        let values: Vec<f64> = (0..rows * cols)
            .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        reg.add_matrix(name, Tensor::new(vec![rows, cols], values)?, rows, cols)
    };
    let zeros_bias = |reg: &mut ParamRegistry, name: &str, n: usize| -> Result<()> {
        reg.add_bias(name, Tensor::zeros(vec![n]))
    };
    let norm = |reg: &mut ParamRegistry, prefix: &str, n: usize| -> Result<()> {
        reg.add_bias(&format!("{prefix}.gain"), Tensor::new(vec![n], vec![1.0; n])?)?;
        reg.add_bias(&format!("{prefix}.bias"), Tensor::zeros(vec![n]))
    };
    let attn = |reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, prefix: &str| -> Result<()> {
        for w in ["wq", "wk", "wv", "wo"] {
            let bound = glorot_bound(d, d);
            let values: Vec<f64> = (0..d * d)
                .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            reg.add_matrix(
                &format!("{prefix}.{w}"),
                Tensor::new(vec![d, d], values)?,
                d,
                d,
            )?;
        }
        for b in ["bq", "bk", "bv", "bo"] {
            reg.add_bias(&format!("{prefix}.{b}"), Tensor::zeros(vec![d]))?;
        }
        Ok(())
    };

    matrix(&mut reg, &mut rng, "embed", v, d)?;
    for i in 0..cfg.n_layers {
        attn(&mut reg, &mut rng, &format!("enc{i}.attn"))?;
        norm(&mut reg, &format!("enc{i}.ln1"), d)?;
        matrix(&mut reg, &mut rng, &format!("enc{i}.ff.w1"), d, ff)?;
        zeros_bias(&mut reg, &format!("enc{i}.ff.b1"), ff)?;
        matrix(&mut reg, &mut rng, &format!("enc{i}.ff.w2"), ff, d)?;
        zeros_bias(&mut reg, &format!("enc{i}.ff.b2"), d)?;
        norm(&mut reg, &format!("enc{i}.ln2"), d)?;
    }
    norm(&mut reg, "enc.ln_final", d)?;
    for i in 0..cfg.n_layers {
        attn(&mut reg, &mut rng, &format!("dec{i}.self"))?;
        norm(&mut reg, &format!("dec{i}.ln1"), d)?;
        attn(&mut reg, &mut rng, &format!("dec{i}.cross"))?;
        norm(&mut reg, &format!("dec{i}.ln2"), d)?;
        matrix(&mut reg, &mut rng, &format!("dec{i}.ff.w1"), d, ff)?;
        zeros_bias(&mut reg, &format!("dec{i}.ff.b1"), ff)?;
        matrix(&mut reg, &mut rng, &format!("dec{i}.ff.w2"), ff, d)?;
        zeros_bias(&mut reg, &format!("dec{i}.ff.b2"), d)?;
        norm(&mut reg, &format!("dec{i}.ln3"), d)?;
    }
    norm(&mut reg, "dec.ln_final", d)?;
    matrix(&mut reg, &mut rng, "out.w", d, v)?;
    zeros_bias(&mut reg, "out.b", v)?;
    Ok(reg)
}

/// Sinusoidal positional encoding rows for positions 0..len.
fn positional_rows(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// A recorded forward pass: the tape, the scalar loss, the flat logits, and
/// the flattened target labels used for the loss.
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: NodeId,
    pub logits: NodeId,
    pub labels: Vec<usize>,
    params_used: Vec<(usize, NodeId)>,
    grads_transferred: bool,
}

impl ForwardPass {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss)[0]
    }

    /// Exact-match fraction of target tokens under teacher forcing.
    pub fn token_accuracy(&self) -> f64 {
        let (rows, cols) = self.tape.dims(self.logits);
        let values = self.tape.value(self.logits);
        let mut hits = 0usize;
        for (r, &label) in self.labels.iter().enumerate().take(rows) {
            let row = &values[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            if best == label {
                hits += 1;
            }
        }
        hits as f64 / self.labels.len() as f64
    }
}

struct GraphBuilder<'a> {
    tape: Tape,
    reg: &'a ParamRegistry,
    used: BTreeMap<usize, NodeId>,
}

impl<'a> GraphBuilder<'a> {
    fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .reg
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        if let Some(&id) = self.used.get(&idx) {
            return Ok(id);
        }
        let id = self.tape.leaf(&self.reg.entry_at(idx).tensor)?;
        self.used.insert(idx, id);
        Ok(id)
    }

    fn linear(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let w = self.param(w)?;
        let b = self.param(b)?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    /// Multi-head attention. `q_in` is (batch*lq) x d, `kv_in` is
    /// (batch*lk) x d; sequences are processed per batch row block.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
        batch: usize,
        lq: usize,
        lk: usize,
        n_heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let q = self.linear(q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let vv = self.linear(kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let d = self.tape.dims(q).1;
        let dh = d / n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let causal_mask: Vec<f64> = if causal {
            let mut m = vec![0.0; lq * lk];
            for i in 0..lq {
                for j in 0..lk {
                    if j > i {
                        m[i * lk + j] = CAUSAL_NEG;
                    }
                }
            }
            m
        } else {
            Vec::new()
        };
        let mut per_batch = Vec::with_capacity(batch);
        for b in 0..batch {
            let qb = self.tape.slice_rows(q, b * lq, lq)?;
            let kb = self.tape.slice_rows(k, b * lk, lk)?;
            let vb = self.tape.slice_rows(vv, b * lk, lk)?;
            let mut heads = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let qh = self.tape.slice_cols(qb, h * dh, dh)?;
                let kh = self.tape.slice_cols(kb, h * dh, dh)?;
                let vh = self.tape.slice_cols(vb, h * dh, dh)?;
                let kt = self.tape.transpose(kh);
                let scores = self.tape.matmul(qh, kt)?;
                let mut scores = self.tape.scale(scores, inv_sqrt);
                if causal {
                    scores = self.tape.add_const(scores, &causal_mask)?;
                }
                let probs = self.tape.softmax_rows(scores)?;
                heads.push(self.tape.matmul(probs, vh)?);
            }
            per_batch.push(self.tape.concat_cols(&heads)?);
        }
        let merged = self.tape.concat_rows(&per_batch)?;
        self.linear(merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn feed_forward(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.tape.relu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn embed(&mut self, ids: &[usize], seq_len: usize, batch: usize, d: usize) -> Result<NodeId> {
        let table = self.param("embed")?;
        let e = self.tape.embedding(table, ids)?;
        let e = self.tape.scale(e, (d as f64).sqrt());
        let rows = positional_rows(seq_len, d);
        let mut pos = Vec::with_capacity(batch * seq_len * d);
        for _ in 0..batch {
            pos.extend_from_slice(&rows);
        }
        self.tape.add_const(e, &pos)
    }
}

fn check_batch(cfg: &ModelConfig, batch: &Batch) -> Result<(usize, usize, usize)> {
    if batch.src.is_empty() || batch.src.len() != batch.tgt.len() {
        return Err(Error::Contract(format!(
            "batch must pair source and target rows, got {} vs {}",
            batch.src.len(),
            batch.tgt.len()
        )));
    }
    let s = batch.src[0].len();
    let t = batch.tgt[0].len();
    if s == 0 || t == 0 {
        return Err(Error::Contract("empty sequence in batch".into()));
    }
    for row in &batch.src {
        if row.len() != s {
            return Err(Error::Contract("ragged source batch".into()));
        }
    }
    for row in &batch.tgt {
        if row.len() != t {
            return Err(Error::Contract("ragged target batch".into()));
        }
    }
    for &len in &[s, t] {
        if len > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: cfg.max_seq_len,
            });
        }
    }
    for row in batch.src.iter().chain(&batch.tgt) {
        for &id in row {
            if id >= cfg.vocab_size {
                return Err(Error::Index(format!(
                    "token id {id} out of range for vocab {}",
                    cfg.vocab_size
                )));
            }
        }
    }
    Ok((batch.src.len(), s, t))
}

/// Mean next-token cross-entropy on the target side with causal masking,
/// teacher-forced from a BOS-shifted decoder input.
pub fn forward_loss(reg: &ParamRegistry, cfg: &ModelConfig, batch: &Batch) -> Result<ForwardPass> {
    let (b, s, t) = check_batch(cfg, batch)?;
    let d = cfg.d_model;
    let mut g = GraphBuilder {
        tape: Tape::new(),
        reg,
        used: BTreeMap::new(),
    };

    // Encoder
    let src_ids: Vec<usize> = batch.src.iter().flatten().copied().collect();
    let mut x = g.embed(&src_ids, s, b, d)?;
    for i in 0..cfg.n_layers {
        let normed = g.layer_norm(x, &format!("enc{i}.ln1"))?;
        let a = g.attention(&format!("enc{i}.attn"), normed, normed, b, s, s, cfg.n_heads, false)?;
        x = g.tape.add(x, a)?;
        let normed = g.layer_norm(x, &format!("enc{i}.ln2"))?;
        let f = g.feed_forward(normed, &format!("enc{i}.ff"))?;
        x = g.tape.add(x, f)?;
    }
    let memory = g.layer_norm(x, "enc.ln_final")?;

    // Decoder with teacher forcing: input row = [BOS, tgt[..t-1]]
    let mut dec_ids = Vec::with_capacity(b * t);
    let mut labels = Vec::with_capacity(b * t);
    for row in &batch.tgt {
        dec_ids.push(BOS_TOKEN);
        dec_ids.extend_from_slice(&row[..t - 1]);
        labels.extend_from_slice(row);
    }
    let mut y = g.embed(&dec_ids, t, b, d)?;
    for i in 0..cfg.n_layers {
        let normed = g.layer_norm(y, &format!("dec{i}.ln1"))?;
        let a = g.attention(&format!("dec{i}.self"), normed, normed, b, t, t, cfg.n_heads, true)?;
        y = g.tape.add(y, a)?;
        let normed = g.layer_norm(y, &format!("dec{i}.ln2"))?;
        let c = g.attention(&format!("dec{i}.cross"), normed, memory, b, t, s, cfg.n_heads, false)?;
        y = g.tape.add(y, c)?;
        let normed = g.layer_norm(y, &format!("dec{i}.ln3"))?;
        let f = g.feed_forward(normed, &format!("dec{i}.ff"))?;
        y = g.tape.add(y, f)?;
    }
    let y = g.layer_norm(y, "dec.ln_final")?;
    // Readout is scaled by 1/sqrt(d) so an untrained model emits near-uniform
    // logits at any width; the projection itself keeps the standard init.
    let out_w = g.param("out.w")?;
    let out_b = g.param("out.b")?;
    let proj = g.tape.matmul(y, out_w)?;
    let proj = g.tape.scale(proj, 1.0 / (d as f64).sqrt());
    let logits = g.tape.add_bias(proj, out_b)?;
    let loss = g.tape.cross_entropy(logits, &labels)?;

    Ok(ForwardPass {
        tape: g.tape,
        loss,
        logits,
        labels,
        params_used: g.used.into_iter().collect(),
        grads_transferred: false,
    })
}

/// Run backward on the recorded pass and accumulate parameter gradients into
/// the registry tensors. Each recorded pass transfers its gradients once;
/// accumulation across passes happens in the registry.
pub fn backward(fp: &mut ForwardPass, reg: &mut ParamRegistry) -> Result<()> {
    if fp.grads_transferred {
        return Err(Error::Contract(
            "gradients of this forward pass were already transferred".into(),
        ));
    }
    fp.tape.backward(fp.loss)?;
    for &(idx, node) in &fp.params_used {
        let grad = fp.tape.grad(node).to_vec();
        reg.entry_at_mut(idx).tensor.accumulate_grad(&grad)?;
    }
    fp.grads_transferred = true;
    Ok(())
}
