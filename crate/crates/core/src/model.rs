//! A small deterministic pre-norm decoder with every intermediate stream exposed.
//!
//! Per layer:
//!
//! ```text
//! h_attn = Attention(Norm(h));  h = h + h_attn
//! h_ffn  = FFN(Norm(h));        h = h + h_ffn
//! ```
//!
//! Norm is RMS normalization, attention is causal multi-head with rotary
//! positions (base 10000) over a KV cache, and the FFN is gated SiLU
//! (`down(silu(gate(x)) * up(x))`). Weights come from a seeded
//! Xoshiro256++ generator, uniform in `[-1, 1)` scaled by `1/sqrt(d)`, so a
//! `(config, seed)` pair fully determines the model.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{candidates, project_with, LensMode, Vocab, DEFAULT_MARKERS};
use crate::tensor::{rms_norm, softmax, Matrix, RMS_EPS};
use crate::trace::{
    DecodeTrace, Grid, LayerRecord, SegmentMap, StepTrace, StreamKind, Streams, TokenId,
    META_MARKERS, TRACE_VERSION,
};

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub grid: Grid,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            vocab_size: 64,
            max_context: 128,
            grid: Grid { h: 4, w: 4 },
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers < 2 {
            return fail(format!("num_layers {} < 2", self.num_layers));
        }
        if self.hidden_dim == 0
            || self.num_heads == 0
            || !self.hidden_dim.is_multiple_of(self.num_heads)
        {
            return fail(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.vocab_size < 8 {
            return fail(format!("vocab_size {} < 8", self.vocab_size));
        }
        if self.ffn_dim == 0 || self.max_context == 0 {
            return fail("ffn_dim and max_context must be positive".into());
        }
        if self.grid.h == 0 || self.grid.w == 0 {
            return fail("grid must be at least 1x1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub embeddings: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// `d×V`; the transpose of `embeddings` when tied.
    pub unembedding: Matrix,
}

fn draw(rng: &mut Xoshiro256PlusPlus, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0) * scale)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite by construction")
}

pub fn new_model(config: ModelConfig, seed: u64) -> Result<ToyModel> {
    config.validate()?;
    let d = config.hidden_dim;
    let f = config.ffn_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);

    let embeddings = draw(&mut rng, config.vocab_size, d, scale);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: draw(&mut rng, d, d, scale),
            wk: draw(&mut rng, d, d, scale),
            wv: draw(&mut rng, d, d, scale),
            wo: draw(&mut rng, d, d, scale),
            ffn_norm: vec![1.0; d],
            w_gate: draw(&mut rng, d, f, scale),
            w_up: draw(&mut rng, d, f, scale),
            w_down: draw(&mut rng, f, d, scale),
        })
        .collect();
    let unembedding = if config.tie_embeddings {
        embeddings.transpose()
    } else {
        draw(&mut rng, d, config.vocab_size, scale)
    };
    Ok(ToyModel {
        seed,
        embeddings,
        layers,
        final_norm: vec![1.0; d],
        unembedding,
        config,
    })
}

/// Rotates consecutive pairs of each head slice by position-dependent angles.
/// An odd trailing dimension in a head is left untouched.
pub(crate) fn apply_rope(v: &mut [f64], pos: usize, head_dim: usize) {
    for head in v.chunks_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let theta = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Per-layer cached keys (post-rotary) and values, one `d`-vector per position.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
}

impl KvCache {
    pub fn new(num_layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); num_layers],
            values: vec![Vec::new(); num_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// All intermediate vectors of one layer for the current query position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStreams {
    pub h_before: Vec<f64>,
    pub h_attn: Vec<f64>,
    pub h_after_attn: Vec<f64>,
    pub h_ffn: Vec<f64>,
    pub h_after: Vec<f64>,
    /// `heads × context` attention weights of the query position.
    pub attention: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStreams {
    pub position: usize,
    pub layers: Vec<LayerStreams>,
}

impl StepStreams {
    pub fn final_hidden(&self) -> &[f64] {
        &self.layers.last().expect("at least two layers").h_after
    }

    /// Head-mean attention row of a layer (0-based), length `position + 1`.
    pub fn mean_attention(&self, layer: usize) -> Vec<f64> {
        let a = &self.layers[layer].attention;
        let heads = a.rows() as f64;
        (0..a.cols())
            .map(|c| (0..a.rows()).map(|r| a.get(r, c)).sum::<f64>() / heads)
            .collect()
    }

    pub fn stream(&self, layer: usize, kind: StreamKind) -> &[f64] {
        let l = &self.layers[layer];
        match kind {
            StreamKind::LayerOut => &l.h_after,
            StreamKind::AttnOut => &l.h_attn,
            StreamKind::FfnOut => &l.h_ffn,
        }
    }
}

impl ToyModel {
    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.num_layers)
    }

    /// Feeds one token at position `cache.len()` and returns every stream.
    pub fn forward_step(&self, cache: &mut KvCache, token: TokenId) -> Result<StepStreams> {
        let cfg = &self.config;
        let pos = cache.len;
        if pos >= cfg.max_context {
            return Err(Error::ContextOverflow {
                len: pos + 1,
                max: cfg.max_context,
            });
        }
        if token >= cfg.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {token} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut h = self.embeddings.row(token).to_vec();
        let mut layers = Vec::with_capacity(cfg.num_layers);

        for (li, w) in self.layers.iter().enumerate() {
            let h_before = h;
            let x = rms_norm(&h_before, &w.attn_norm, RMS_EPS)?;
            let mut q = w.wq.vec_mul(&x)?;
            let mut k = w.wk.vec_mul(&x)?;
            let v = w.wv.vec_mul(&x)?;
            apply_rope(&mut q, pos, hd);
            apply_rope(&mut k, pos, hd);
            cache.keys[li].push(k);
            cache.values[li].push(v);
            let keys = &cache.keys[li];
            let values = &cache.values[li];

            let mut attention = Matrix::zeros(cfg.num_heads, pos + 1);
            let mut concat = vec![0.0; cfg.hidden_dim];
            for head in 0..cfg.num_heads {
                let r = head * hd..(head + 1) * hd;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|kp| {
                        q[r.clone()]
                            .iter()
                            .zip(&kp[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let probs = softmax(&scores)?;
                for (p, (&wgt, vp)) in probs.iter().zip(values).enumerate() {
                    attention.set(head, p, wgt);
                    for (o, x) in concat[r.clone()].iter_mut().zip(&vp[r.clone()]) {
                        *o += wgt * x;
                    }
                }
            }
            let h_attn = w.wo.vec_mul(&concat)?;
            let h_after_attn = add(&h_before, &h_attn);

            let x2 = rms_norm(&h_after_attn, &w.ffn_norm, RMS_EPS)?;
            let gate = w.w_gate.vec_mul(&x2)?;
            let up = w.w_up.vec_mul(&x2)?;
            let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
            let h_ffn = w.w_down.vec_mul(&act)?;
            let h_after = add(&h_after_attn, &h_ffn);

            h = h_after.clone();
            layers.push(LayerStreams {
                h_before,
                h_attn,
                h_after_attn,
                h_ffn,
                h_after,
                attention,
            });
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("hidden state at position {pos}")));
        }
        cache.len += 1;
        Ok(StepStreams {
            position: pos,
            layers,
        })
    }

    /// Logit-lens projection of any hidden vector.
    pub fn lens(&self, hidden: &[f64], mode: LensMode) -> Result<Vec<f64>> {
        project_with(hidden, &self.final_norm, &self.unembedding, mode)
    }

    /// Next-token logits from the final layer output.
    pub fn output_logits(&self, streams: &StepStreams) -> Result<Vec<f64>> {
        self.lens(streams.final_hidden(), LensMode::FinalNorm)
    }

    /// FNV-1a over the bit patterns of every weight, in construction order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |xs: &[f64]| {
            for x in xs {
                for b in x.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        eat(self.embeddings.data());
        for l in &self.layers {
            eat(&l.attn_norm);
            for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
                eat(m.data());
            }
            eat(&l.ffn_norm);
            for m in [&l.w_gate, &l.w_up, &l.w_down] {
                eat(m.data());
            }
        }
        eat(&self.final_norm);
        eat(self.unembedding.data());
        h
    }
}

/// Model description as stored on disk: weights are regenerated from config and seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub seed: u64,
    pub checksum: String,
}

impl ModelSpec {
    pub fn of(model: &ToyModel) -> Self {
        Self {
            config: model.config.clone(),
            seed: model.seed,
            checksum: format!("{:016x}", model.checksum()),
        }
    }

    pub fn build(&self) -> Result<ToyModel> {
        let m = new_model(self.config.clone(), self.seed)?;
        let sum = format!("{:016x}", m.checksum());
        if sum != self.checksum {
            return Err(Error::Config(format!(
                "weight checksum {sum} does not match recorded {}",
                self.checksum
            )));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    pub segments: SegmentMap,
}

impl Prompt {
    /// Builds a prompt whose segments are laid out contiguously from the given lengths.
    pub fn from_parts(system: &[TokenId], vision: &[TokenId], instruction: &[TokenId]) -> Self {
        let segments = SegmentMap::contiguous(system.len(), vision.len(), instruction.len());
        Self {
            tokens: [system, vision, instruction].concat(),
            segments,
        }
    }

    /// Deterministic random prompt: `system` tokens, one vision token per grid
    /// cell, then `instruction` tokens. Token 0 is never drawn.
    pub fn synthetic(config: &ModelConfig, system: usize, instruction: usize, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut draw = |n: usize| -> Vec<TokenId> {
            (0..n)
                .map(|_| rng.random_range(1..config.vocab_size))
                .collect()
        };
        let s = draw(system);
        let v = draw(config.grid.cells());
        let i = draw(instruction);
        Self::from_parts(&s, &v, &i)
    }

    /// The toy decoder needs segments that tile the prompt exactly.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let s = &self.segments;
        let tiles = s.system.start == 0
            && s.system.end == s.vision.start
            && s.vision.end == s.instruction.start
            && s.instruction.end == s.output_start
            && s.output_start == self.tokens.len();
        if !tiles {
            return Err(Error::InvalidArgument(
                "prompt segments must tile the prompt as [system | vision | instruction]".into(),
            ));
        }
        if s.vision.len() != config.grid.cells() {
            return Err(Error::InvalidArgument(format!(
                "{} vision tokens for a {}x{} grid",
                s.vision.len(),
                config.grid.h,
                config.grid.w
            )));
        }
        if s.instruction.is_empty() {
            return Err(Error::InvalidArgument(
                "instruction segment is empty".into(),
            ));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "prompt token {bad} outside vocabulary"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub topk: usize,
    pub end_token: Option<TokenId>,
    pub lens: LensMode,
    /// Record `visual_grid` and `instruction_attn` per layer.
    pub capture_attention_maps: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new: 16,
            topk: 10,
            end_token: None,
            lens: LensMode::FinalNorm,
            capture_attention_maps: true,
        }
    }
}

impl ToyModel {
    fn layer_records(
        &self,
        streams: &StepStreams,
        segments: &SegmentMap,
        vocab: &Vocab,
        opts: &GenerateOptions,
    ) -> Result<Vec<LayerRecord>> {
        (0..self.config.num_layers)
            .map(|li| {
                let attn = streams.mean_attention(li);
                let mut group_ratio = [0.0; 4];
                for (p, a) in attn.iter().enumerate() {
                    // prompt segments tile the context, so every position has a group
                    let g = segments.group_of(p).unwrap_or(3);
                    group_ratio[g] += a;
                }
                let (visual_grid, instruction_attn) = if opts.capture_attention_maps {
                    (
                        Some(attn[segments.vision.start..segments.vision.end].to_vec()),
                        Some(attn[segments.instruction.start..segments.instruction.end].to_vec()),
                    )
                } else {
                    (None, None)
                };
                let mut out = Streams::default();
                for kind in StreamKind::ALL {
                    let logits = self.lens(streams.stream(li, kind), opts.lens)?;
                    *out.get_mut(kind) = candidates(&logits, vocab, opts.topk)?;
                }
                Ok(LayerRecord {
                    layer: li + 1,
                    group_ratio,
                    visual_grid,
                    instruction_attn,
                    streams: out,
                })
            })
            .collect()
    }

    fn trace_header(&self, prompt: &Prompt, vocab: &Vocab, opts: &GenerateOptions) -> DecodeTrace {
        let mut meta = BTreeMap::new();
        meta.insert("model".to_string(), "toy-decoder".to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        meta.insert("checksum".to_string(), format!("{:016x}", self.checksum()));
        meta.insert("head_aggregation".to_string(), "mean".to_string());
        meta.insert(
            "lens".to_string(),
            match opts.lens {
                LensMode::FinalNorm => "final-norm",
                LensMode::Raw => "raw",
            }
            .to_string(),
        );
        if vocab.normalizer().markers() != DEFAULT_MARKERS {
            meta.insert(
                META_MARKERS.to_string(),
                serde_json::to_string(vocab.normalizer().markers()).expect("strings serialize"),
            );
        }
        DecodeTrace {
            version: TRACE_VERSION,
            num_layers: self.config.num_layers,
            vocab_size: self.config.vocab_size,
            topk: opts.topk,
            grid: Some(self.config.grid),
            segments: prompt.segments,
            meta,
            steps: Vec::new(),
        }
    }

    /// Shared greedy decode loop. `choose` sees each recorded step and returns
    /// the token appended to the context for the next step.
    pub(crate) fn decode_loop<F>(
        &self,
        prompt: &Prompt,
        vocab: &Vocab,
        opts: &GenerateOptions,
        mut choose: F,
    ) -> Result<DecodeTrace>
    where
        F: FnMut(&StepTrace) -> Result<TokenId>,
    {
        prompt.check(&self.config)?;
        if vocab.len() != self.config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        if opts.topk < 5 || opts.topk > self.config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "topk {} must be in 5..={}",
                opts.topk, self.config.vocab_size
            )));
        }
        let max = self.config.max_context;
        if prompt.tokens.len() > max {
            return Err(Error::PromptTooLong {
                len: prompt.tokens.len(),
                max,
            });
        }
        let needed = prompt.tokens.len() + opts.max_new.saturating_sub(1);
        if needed > max {
            return Err(Error::ContextOverflow { len: needed, max });
        }

        let mut trace = self.trace_header(prompt, vocab, opts);
        if opts.max_new == 0 {
            return Ok(trace);
        }
        let mut cache = self.new_cache();
        let mut last = None;
        for &tok in &prompt.tokens {
            last = Some(self.forward_step(&mut cache, tok)?);
        }
        let mut streams = last.expect("prompt is non-empty");

        for t in 1..=opts.max_new {
            let layers = self.layer_records(&streams, &prompt.segments, vocab, opts)?;
            let emitted = layers.last().expect("num_layers >= 2").streams.layer[0].clone();
            let step = StepTrace { t, emitted, layers };
            let next = choose(&step)?;
            trace.steps.push(step);
            if t == opts.max_new || opts.end_token == Some(next) {
                break;
            }
            streams = self.forward_step(&mut cache, next)?;
        }
        Ok(trace)
    }
}

/// Greedy generation with full per-layer instrumentation.
pub fn generate(
    model: &ToyModel,
    prompt: &Prompt,
    opts: &GenerateOptions,
    vocab: &Vocab,
) -> Result<DecodeTrace> {
    model.decode_loop(prompt, vocab, opts, |step| Ok(step.emitted.token_id))
}
