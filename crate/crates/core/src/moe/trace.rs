//! Routing traces and their binary format.
//!
//! Layout (little-endian): magic `MOET`, then `u32` version, batch, layers,
//! experts, top_k. Records follow in `(step, layer, token)` order, each being
//! `token_id: u32`, `active: [u16; top_k]`, `scores: [f32; experts]`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TRACE_MAGIC: [u8; 4] = *b"MOET";
pub const TRACE_VERSION: u32 = 1;

/// Routing of one batch at one layer, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting {
    /// `batch × top_k` active experts.
    pub active: Vec<u16>,
    /// `batch × experts` router scores.
    pub scores: Vec<f32>,
}

/// One recorded batch: its token ids and per-layer routing.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerRouting>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    batch: usize,
    layers: usize,
    experts: usize,
    top_k: usize,
    steps: Vec<TraceStep>,
}

impl RoutingTrace {
    pub fn new(batch: usize, layers: usize, experts: usize, top_k: usize) -> Result<Self> {
        if batch == 0 || layers == 0 || experts == 0 || top_k == 0 || top_k > experts {
            return Err(Error::invalid(format!(
                "trace dims batch={batch} layers={layers} experts={experts} top_k={top_k}"
            )));
        }
        if experts > u16::MAX as usize {
            return Err(Error::invalid("experts exceed u16 range"));
        }
        Ok(Self { batch, layers, experts, top_k, steps: Vec::new() })
    }

    /// A `top_k = 1` trace with one-hot scores from explicit assignments.
    /// `assign[step][layer][token]` is the expert of that token.
    pub fn from_top1(experts: usize, tokens: &[Vec<u32>], assign: &[Vec<Vec<usize>>]) -> Result<Self> {
        let first = assign.first().ok_or_else(|| Error::invalid("no steps"))?;
        let layers = first.len();
        let batch = first.first().map_or(0, Vec::len);
        let mut trace = Self::new(batch, layers, experts, 1)?;
        if tokens.len() != assign.len() {
            return Err(Error::invalid("token and assignment step counts differ"));
        }
        for (toks, step) in tokens.iter().zip(assign) {
            let layers = step
                .iter()
                .map(|row| {
                    let mut scores = vec![0.0f32; experts * row.len()];
                    for (i, &e) in row.iter().enumerate() {
                        if e < experts {
                            scores[i * experts + e] = 1.0;
                        }
                    }
                    LayerRouting { active: row.iter().map(|&e| e as u16).collect(), scores }
                })
                .collect();
            trace.push(TraceStep { tokens: toks.clone(), layers })?;
        }
        Ok(trace)
    }

    pub fn push(&mut self, step: TraceStep) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if step.tokens.len() != self.batch {
            return bad(format!("step has {} tokens, trace batch {}", step.tokens.len(), self.batch));
        }
        if step.layers.len() != self.layers {
            return bad(format!("step has {} layers, trace has {}", step.layers.len(), self.layers));
        }
        for lr in &step.layers {
            if lr.active.len() != self.batch * self.top_k || lr.scores.len() != self.batch * self.experts {
                return bad("layer routing has wrong length".into());
            }
            if lr.active.iter().any(|&e| e as usize >= self.experts) {
                return bad("active expert out of range".into());
            }
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Total routed tokens per layer (`steps × batch`).
    pub fn num_tokens(&self) -> usize {
        self.steps.len() * self.batch
    }

    pub fn active(&self, step: usize, layer: usize, token: usize) -> &[u16] {
        let k = self.top_k;
        &self.steps[step].layers[layer].active[token * k..(token + 1) * k]
    }

    pub fn scores(&self, step: usize, layer: usize, token: usize) -> &[f32] {
        let e = self.experts;
        &self.steps[step].layers[layer].scores[token * e..(token + 1) * e]
    }

    /// First entry of the active set, i.e. the highest-ranked expert.
    pub fn top1(&self, step: usize, layer: usize, token: usize) -> usize {
        self.active(step, layer, token)[0] as usize
    }

    /// `(step, token)` pairs in record order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.steps.len()).flat_map(move |s| (0..self.batch).map(move |i| (s, i)))
    }

    fn record_len(&self) -> usize {
        4 + 2 * self.top_k + 4 * self.experts
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.steps.len() * self.layers * self.batch * self.record_len());
        buf.extend_from_slice(&TRACE_MAGIC);
        for v in [TRACE_VERSION, self.batch as u32, self.layers as u32, self.experts as u32, self.top_k as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for step in &self.steps {
            for lr in &step.layers {
                for (i, &tok) in step.tokens.iter().enumerate() {
                    buf.extend_from_slice(&tok.to_le_bytes());
                    for &e in &lr.active[i * self.top_k..(i + 1) * self.top_k] {
                        buf.extend_from_slice(&e.to_le_bytes());
                    }
                    for &s in &lr.scores[i * self.experts..(i + 1) * self.experts] {
                        buf.extend_from_slice(&s.to_le_bytes());
                    }
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::format("trace", m);
        if bytes.len() < 24 {
            return Err(fmt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != TRACE_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != TRACE_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let (batch, layers, experts, top_k) =
            (word(8) as usize, word(12) as usize, word(16) as usize, word(20) as usize);
        let mut trace = Self::new(batch, layers, experts, top_k).map_err(|e| fmt(e.to_string()))?;
        let body = &bytes[24..];
        let block = trace.record_len() * batch * layers;
        if !body.len().is_multiple_of(block) {
            return Err(fmt(format!("body of {} bytes is not a multiple of the {block}-byte step", body.len())));
        }
        let rec = trace.record_len();
        for chunk in body.chunks_exact(block) {
            let mut tokens = vec![0u32; batch];
            let mut step_layers = Vec::with_capacity(layers);
            for l in 0..layers {
                let mut active = Vec::with_capacity(batch * top_k);
                let mut scores = Vec::with_capacity(batch * experts);
                for (i, slot) in tokens.iter_mut().enumerate() {
                    let r = &chunk[(l * batch + i) * rec..(l * batch + i + 1) * rec];
                    let tok = u32::from_le_bytes(r[..4].try_into().unwrap());
                    if l == 0 {
                        *slot = tok;
                    } else if *slot != tok {
                        return Err(fmt(format!("token id mismatch at layer {l}, position {i}")));
                    }
                    let mut at = 4;
                    for _ in 0..top_k {
                        active.push(u16::from_le_bytes([r[at], r[at + 1]]));
                        at += 2;
                    }
                    for _ in 0..experts {
                        scores.push(f32::from_le_bytes(r[at..at + 4].try_into().unwrap()));
                        at += 4;
                    }
                }
                step_layers.push(LayerRouting { active, scores });
            }
            trace.push(TraceStep { tokens, layers: step_layers }).map_err(|e| fmt(e.to_string()))?;
        }
        Ok(trace)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
