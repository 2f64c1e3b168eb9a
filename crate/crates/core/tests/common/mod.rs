#![allow(dead_code)]

use std::collections::BTreeMap;

use domlens::model::{GenerateOptions, Prompt};
use domlens::trace::{Candidate, DecodeTrace, LayerRecord, SegmentMap, StepTrace, Streams};
use domlens::{new_model, ModelConfig, ToyModel, Vocab};
use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Surface forms where ids `2k+1` and `2k+2` normalize to the same word
/// (`▁wk` and `WK`), so dominance is decided on normalized strings.
pub fn paired_surface(id: usize) -> String {
    if id == 0 {
        return "</s>".to_string();
    }
    let base = format!("w{}", (id - 1) / 2);
    if id % 2 == 1 {
        format!("\u{2581}{base}")
    } else {
        base.to_uppercase()
    }
}

/// Hand-written reference normalization: drop leading markers and lowercase
/// until nothing changes.
pub fn reference_normalize(s: &str) -> String {
    let mut cur = s.to_string();
    loop {
        let mut next = cur.as_str();
        for m in ["\u{2581}", "\u{0120}", " "] {
            if let Some(rest) = next.strip_prefix(m) {
                next = rest;
            }
        }
        let next = next.to_lowercase();
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

pub fn candidate(id: usize, score: f64) -> Candidate {
    let surface = paired_surface(id);
    Candidate {
        token_id: id,
        normalized: reference_normalize(&surface),
        surface,
        score,
    }
}

fn random_stream(rng: &mut Rng, k: usize, v: usize) -> Vec<Candidate> {
    let mut ids: Vec<usize> = (1..v).collect();
    for i in 0..k {
        let j = rng.random_range(i..ids.len());
        ids.swap(i, j);
    }
    let mut scores: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    ids[..k]
        .iter()
        .zip(scores)
        .map(|(&id, s)| candidate(id, s))
        .collect()
}

fn random_ratio(rng: &mut Rng) -> [f64; 4] {
    let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
    let total: f64 = raw.iter().sum();
    raw.map(|x| x / total)
}

pub fn random_step(rng: &mut Rng, t: usize, layers: usize, k: usize, v: usize) -> StepTrace {
    let records: Vec<LayerRecord> = (1..=layers)
        .map(|l| LayerRecord {
            layer: l,
            group_ratio: random_ratio(rng),
            visual_grid: None,
            instruction_attn: None,
            streams: Streams {
                layer: random_stream(rng, k, v),
                attn: random_stream(rng, k, v),
                ffn: random_stream(rng, k, v),
            },
        })
        .collect();
    let emitted = if rng.random_bool(0.5) {
        records[layers - 1].streams.layer[0].clone()
    } else {
        candidate(rng.random_range(1..v), 0.0)
    };
    StepTrace {
        t,
        emitted,
        layers: records,
    }
}

/// A valid trace with random candidate lists over the paired vocabulary.
pub fn random_trace(rng: &mut Rng, layers: usize, steps: usize, k: usize, v: usize) -> DecodeTrace {
    DecodeTrace {
        version: 1,
        num_layers: layers,
        vocab_size: v,
        topk: k,
        grid: None,
        segments: SegmentMap::contiguous(1, 4, 2),
        meta: BTreeMap::from([("model".to_string(), "synthetic".to_string())]),
        steps: (1..=steps)
            .map(|t| random_step(rng, t, layers, k, v))
            .collect(),
    }
}

pub fn toy_config(layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 24,
        vocab_size: 48,
        max_context: 64,
        grid: domlens::trace::Grid { h: 2, w: 3 },
        tie_embeddings: false,
    }
}

pub struct Toy {
    pub model: ToyModel,
    pub vocab: Vocab,
    pub prompt: Prompt,
}

pub fn toy(layers: usize, seed: u64) -> Toy {
    let model = new_model(toy_config(layers), seed).unwrap();
    let vocab = Vocab::synthetic(model.config.vocab_size);
    let prompt = Prompt::synthetic(&model.config, 2, 3, seed);
    Toy {
        model,
        vocab,
        prompt,
    }
}

pub fn toy_trace(layers: usize, seed: u64, max_new: usize) -> DecodeTrace {
    let t = toy(layers, seed);
    let opts = GenerateOptions {
        max_new,
        topk: 5,
        ..Default::default()
    };
    domlens::generate(&t.model, &t.prompt, &opts, &t.vocab).unwrap()
}
